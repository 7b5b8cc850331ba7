"""End-to-end model: scene encoder, behavior flow, trajectory decoder."""

from __future__ import annotations

import numpy as np

from . import numcore as nc
from .config import ModelConfig
from .data import SceneWindow
from .decoder import BatchDecoded, BidirectionalDecoder, LossWeights, total_loss, trajectory_loss_batched
from .errors import ConfigError
from .flow import FlowStack, nll_loss, sample_behaviors
from .graphormer import SceneEncoder
from .numcore import Tensor


class TrajectoryModel:
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.encoder = SceneEncoder(
            rng,
            d=cfg.d,
            n_heads=cfg.n_heads,
            t_obs=cfg.t_obs,
            t_pred=cfg.t_pred,
            use_temporal_graphormer=cfg.use_temporal_graphormer,
            use_spatial=cfg.use_spatial,
            use_centrality=cfg.use_centrality,
            use_positional=cfg.use_positional,
            use_temporal_mask=cfg.use_temporal_mask,
            use_rel_pos=cfg.use_rel_pos,
            use_steering=cfg.use_steering,
            use_spatial_mask=cfg.use_spatial_mask,
        )
        self.flow = FlowStack(
            rng,
            channels=cfg.d,
            cond_dim=cfg.d,
            n_steps=cfg.n_flow_steps,
            use_pattern_norm=cfg.use_pattern_norm,
            factor_out=cfg.factor_out,
            factor_out_every=cfg.factor_out_every,
            factor_out_channels=cfg.factor_out_channels,
        )
        self.decoder = BidirectionalDecoder(
            rng, channels=cfg.d, d_h=cfg.d_h, t_pred=cfg.t_pred, bidirectional=cfg.bidirectional
        )

    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for prefix, owner in (("encoder", self.encoder), ("flow", self.flow), ("decoder", self.decoder)):
            for k, v in owner.params().items():
                out[f"{prefix}.{k}"] = v
        return out

    def mark_trainable(self) -> dict[str, Tensor]:
        params = self.params()
        for p in params.values():
            p.requires_grad = True
        return params

    def _check_window(self, w: SceneWindow) -> None:
        if w.t_obs != self.cfg.t_obs or w.t_pred != self.cfg.t_pred:
            raise ConfigError(
                f"window steps ({w.t_obs}, {w.t_pred}) do not match model "
                f"configuration ({self.cfg.t_obs}, {self.cfg.t_pred})"
            )

    def encode_windows(self, windows: list[SceneWindow], training: bool) -> tuple[Tensor | None, Tensor]:
        """Stack per-window target encodings into (B, C) batches."""
        mb_rows = []
        st_rows = []
        for w in windows:
            self._check_window(w)
            full = np.concatenate([w.obs, w.fut], axis=1) if training else None
            mb, st = self.encoder.encode_target(w.obs, w.target_index, full=full, training=training)
            st_rows.append(st)
            if mb is not None:
                mb_rows.append(mb)
        mb_batch = nc.concat_rows(mb_rows) if mb_rows else None
        return mb_batch, nc.concat_rows(st_rows)

    def batch_loss(
        self,
        windows: list[SceneWindow],
        k_train: int,
        rng: np.random.Generator,
        weights: LossWeights = LossWeights(),
        sigma: float = 1.0,
    ) -> tuple[Tensor, dict[str, float]]:
        """Likelihood loss on the batch plus best-of-K trajectory losses."""
        mb, st = self.encode_windows(windows, training=True)
        l_p = nll_loss(mb, st, self.flow)
        behaviors, _ = sample_behaviors(st, self.flow, k_train, sigma, rng)
        decoded = self.decoder.decode_batch(behaviors)
        l_trajs = []
        for b, w in enumerate(windows):
            lo, hi = b * k_train, (b + 1) * k_train
            per_window = BatchDecoded(
                goal=nc.slice_rows(decoded.goal, lo, hi),
                y_f=[nc.slice_rows(t, lo, hi) for t in decoded.y_f],
                y_b=[nc.slice_rows(t, lo, hi) for t in decoded.y_b] if decoded.y_b is not None else None,
                y_both=[nc.slice_rows(t, lo, hi) for t in decoded.y_both] if decoded.y_both is not None else None,
            )
            gt = w.fut[w.target_index]
            l_trajs.append(trajectory_loss_batched(per_window, gt, gt[-1], weights))
        loss = total_loss(l_p, l_trajs)
        stats = {
            "l_p": float(l_p.data),
            "l_traj": float(np.mean([float(t.data) for t in l_trajs])) if l_trajs else 0.0,
            "l_total": float(loss.data),
        }
        return loss, stats

    def _stack_prediction(self, decoded: BatchDecoded) -> np.ndarray:
        """(M, t_p, 2) trajectory used for metrics: the fused head, or the
        forward head when running forward-only."""
        rows = decoded.y_both if decoded.y_both is not None else decoded.y_f
        return np.stack([r.data for r in rows], axis=1)

    def predict(self, window: SceneWindow, k: int, sigma: float, rng: np.random.Generator) -> np.ndarray:
        """K sampled futures for the window's target, in world coordinates."""
        self._check_window(window)
        with nc.no_grad():
            _, st = self.encoder.encode_target(window.obs, window.target_index)
            behaviors, _ = sample_behaviors(st, self.flow, k, sigma, rng)
            decoded = self.decoder.decode_batch(behaviors)
            pred = self._stack_prediction(decoded)
        return pred + window.origin

    def predict_all_pedestrians(
        self, window: SceneWindow, k: int, sigma: float, rng: np.random.Generator
    ) -> np.ndarray:
        """(N, K, t_p, 2) world-frame futures, re-targeting each pedestrian."""
        preds = []
        for i in range(window.n_pedestrians):
            retargeted = window if i == window.target_index else window.retarget(i)
            preds.append(self.predict(retargeted, k, sigma, rng))
        return np.stack(preds)
