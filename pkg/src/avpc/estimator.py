"""scikit-learn style front end over the functional modules."""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .data import ClipBank, ClipRecord, DataConfig
from .dsp import SpectrogramConfig, apply_mask_and_reconstruct, magnitude_spectrogram, stft
from .evaluation import evaluate_testset
from .model import AVPCModel, load_checkpoint, network_input, save_checkpoint
from .pcnet import PCNetArch
from .training import TrainConfig, pretrain_rcop, train_mas
from .validation import check_class_ids, check_frames, check_waveform, check_waveform_batch


class SpectrogramTransformer(TransformerMixin, BaseEstimator):
    """Waveforms ``(n_clips, n_samples)`` -> warped magnitudes ``(n_clips, bins, frames)``."""

    def __init__(self, sample_rate_hz=8000, window_len=510, hop_len=128, fft_size=510,
                 clip_samples=8192, warp_bins=64, frames=64):
        self.sample_rate_hz = sample_rate_hz
        self.window_len = window_len
        self.hop_len = hop_len
        self.fft_size = fft_size
        self.clip_samples = clip_samples
        self.warp_bins = warp_bins
        self.frames = frames

    def fit(self, X=None, y=None):
        self.config_ = SpectrogramConfig(**self.get_params())
        if X is not None:
            check_waveform_batch(X, self.config_.clip_samples)
        return self

    def transform(self, X):
        check_is_fitted(self, "config_")
        arr = check_waveform_batch(X, self.config_.clip_samples)
        return np.stack([magnitude_spectrogram(x, self.config_) for x in arr])


class AVPCSeparator(BaseEstimator):
    """Visually guided separator trained with Mix-and-Separate.

    ``fit`` takes a :class:`~avpc.data.ClipBank` (or a list of clip records,
    synthesised with ``data_config``). ``separate`` takes one mixture
    waveform and one visual cue per source: class ids when
    ``guidance="class"``, frame stacks ``(N, F, H, W, 3)`` otherwise.
    """

    def __init__(self, guidance="frames", feature_side=2, t_train=5, t_test=5, n_sources=2,
                 epochs=60, steps_per_epoch=8, batch_size=8, lr_separation=1e-3, rcop_epochs=0,
                 n_classes=8, seed=0):
        self.guidance = guidance
        self.feature_side = feature_side
        self.t_train = t_train
        self.t_test = t_test
        self.n_sources = n_sources
        self.epochs = epochs
        self.steps_per_epoch = steps_per_epoch
        self.batch_size = batch_size
        self.lr_separation = lr_separation
        self.rcop_epochs = rcop_epochs
        self.n_classes = n_classes
        self.seed = seed

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            n_sources=self.n_sources, batch_size=self.batch_size, epochs=self.epochs,
            steps_per_epoch=self.steps_per_epoch, lr_separation=self.lr_separation,
            rcop_epochs=self.rcop_epochs, seed=self.seed,
        )

    @staticmethod
    def _as_bank(X, data_config: DataConfig | None) -> ClipBank:
        if isinstance(X, ClipBank):
            return X
        records = list(X)
        if not records or not all(isinstance(r, ClipRecord) for r in records):
            raise ValueError("X must be a ClipBank or a non-empty list of ClipRecord")
        return ClipBank(records, data_config or DataConfig())

    def fit(self, X, y=None, data_config: DataConfig | None = None):
        bank = self._as_bank(X, data_config)
        cfg = self._train_config()
        sc = bank.cfg.spectrogram
        if sc.warp_bins != sc.frames:
            raise ValueError("the spectrogram grid must be square")
        torch.manual_seed(self.seed)
        arch = PCNetArch(spec_side=sc.warp_bins, feature_side=self.feature_side,
                         t_train=self.t_train, t_test=self.t_test)
        model = AVPCModel(arch, guidance=self.guidance, n_classes=self.n_classes)
        self.rcop_losses_ = []
        if self.rcop_epochs > 0:
            self.rcop_losses_ = pretrain_rcop(model, bank, cfg).losses
        result = train_mas(model, bank, cfg, spectrogram=sc)
        self.model_ = model
        self.spectrogram_ = sc
        self.loss_curve_ = list(result.losses)
        return self

    # -- inference -------------------------------------------------------

    def _visual(self, visual, n: int | None = None):
        if self.model_.guidance == "class":
            ids = check_class_ids(visual, self.model_.n_classes)
            if n is not None and ids.size != n:
                raise ValueError(f"got {ids.size} class ids, expected {n}")
            return torch.as_tensor(ids)
        return torch.as_tensor(check_frames(visual, n))

    def predict_mask(self, mixture, visual) -> np.ndarray:
        """Masks ``(N, bins, frames)`` on the warped grid, one per visual cue."""
        check_is_fitted(self, "model_")
        sc = self.spectrogram_
        mix = check_waveform(mixture, sc.clip_samples, name="mixture")
        vis = self._visual(visual)
        n = vis.shape[0]
        model = self.model_.eval()
        dt = next(model.parameters()).dtype
        spec = network_input(magnitude_spectrogram(mix, sc)).to(dt).expand(n, -1, -1, -1)
        if vis.is_floating_point():
            vis = vis.to(dt)
        with torch.no_grad():
            mask, _, _ = model(spec, vis, T=self.model_.arch.t_test)
        return mask[:, 0].double().numpy()

    def separate(self, mixture, visual) -> np.ndarray:
        """Waveforms ``(N, n_samples)`` for the sources named by ``visual``."""
        masks = self.predict_mask(mixture, visual)
        sc = self.spectrogram_
        mix = check_waveform(mixture, sc.clip_samples, name="mixture")
        comp = stft(mix, sc)
        return np.stack([apply_mask_and_reconstruct(comp, m, sc).samples for m in masks])

    def predict(self, mixture, visual) -> np.ndarray:
        return self.separate(mixture, visual)

    def score(self, X, y=None, data_config: DataConfig | None = None) -> float:
        """Median SDR (dB) over fixed-seed test mixtures drawn from ``X``."""
        check_is_fitted(self, "model_")
        bank = self._as_bank(X, data_config)
        rep = evaluate_testset(self.model_, bank, n_sources=self.n_sources, T_test=self.t_test, seed=self.seed)
        return rep.summary()["sdr_median"]

    # -- persistence -------------------------------------------------------

    def save(self, path):
        check_is_fitted(self, "model_")
        return save_checkpoint(path, self.model_, seed=self.seed, meta={"estimator": self.get_params()},
                               spectrogram=self.spectrogram_)

    @classmethod
    def load(cls, path) -> "AVPCSeparator":
        model, payload = load_checkpoint(path)
        params = dict(payload.get("meta", {}).get("estimator", {}))
        if not params:
            arch = model.arch
            params = {"guidance": model.guidance, "feature_side": arch.feature_side, "t_train": arch.t_train,
                      "t_test": arch.t_test, "n_classes": model.n_classes}
        est = cls(**params)
        est.model_ = model.eval()
        d = payload.get("spectrogram")
        est.spectrogram_ = SpectrogramConfig(**d) if d else SpectrogramConfig()
        est.loss_curve_ = []
        est.rcop_losses_ = []
        return est
