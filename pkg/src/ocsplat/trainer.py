"""Training loop: masked reconstruction, uncertainty and mask heads, OC
tracking, per-round anchor refresh, densification and pruning."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import anchors as anc
from .assessment import assess, beta_scale, normalize_beta, texture_map
from .classifier import Adam, MaskHead, UncertaintyHead, feature_scaler, standardize, view_features
from .losses import gs_loss, psnr, ssim
from .oc import ObservationStats, observe, ocp_prune
from .render import backward, render
from .scene import (
    SCHEMA_VERSION,
    STREAM_INIT,
    STREAM_MLP,
    STREAM_SHUFFLE,
    Dataset,
    Scene,
    check_schema,
    logit,
    scene_from_dict,
    scene_to_dict,
    sub_rng,
)

log = logging.getLogger(__name__)

ABLATIONS = ("occ", "ocp", "hybrid", "residual", "dynamic-threshold", "masking")


class NumericalError(RuntimeError):
    """A non-finite value appeared during training."""


@dataclass
class TrainConfig:
    iterations: int = 4000
    lambda_s: float = 0.2
    densify_interval: int | None = None  # defaults to the number of training views
    densify_grad_threshold: float = 0.06
    opacity_prune_threshold: float = 0.005
    warmup_rounds: int = 3
    seed: int = 0
    eval_every: int | None = None  # defaults to five rounds
    lambda4: float = 0.25
    lambda5: float = 0.25
    disable: tuple = ()
    lr_position: float = 5e-4
    lr_scale: float = 1e-2
    lr_rotation: float = 5e-3
    lr_opacity: float = 0.1
    lr_color: float = 5e-3
    lr_heads: float = 1e-3
    clone_scale_max: float = 0.04
    max_gaussians_factor: float = 3.0
    init_position_noise: float = 0.005
    init_color_noise: float = 0.05
    init_opacity: float = 0.1
    background: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.disable = tuple(sorted(set(self.disable)))
        unknown = set(self.disable) - set(ABLATIONS)
        if unknown:
            raise ValueError(f"unknown ablation toggles {sorted(unknown)}; known: {ABLATIONS}")
        if "hybrid" in self.disable and "residual" in self.disable:
            raise ValueError("cannot disable both the residual and the hybrid assessment")
        if self.iterations <= 0 or self.warmup_rounds < 0:
            raise ValueError("iterations must be positive and warmup_rounds non-negative")
        if not 0.0 <= self.lambda_s <= 1.0:
            raise ValueError("lambda_s must lie in [0, 1]")
        anc.combine_anchors(0.0, 1.0, self.lambda4, self.lambda5)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["disable"] = list(self.disable)
        d["background"] = list(self.background)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["disable"] = tuple(d.get("disable", ()))
        d["background"] = tuple(d.get("background", (0.0, 0.0, 0.0)))
        return cls(**d)


@dataclass
class ViewCache:
    residual: np.ndarray
    beta: np.ndarray
    oc_pixels: np.ndarray


def initial_scene(true_scene: Scene, config: TrainConfig) -> Scene:
    """Sparse-reconstruction style start: jittered centers with true-ish colors,
    isotropic nearest-neighbour scales and low opacity."""
    rng = sub_rng(config.seed, STREAM_INIT)
    n = len(true_scene)
    pos = true_scene.positions + rng.normal(0.0, config.init_position_noise, (n, 2))
    if n > 1:
        d = np.linalg.norm(pos[:, None, :] - pos[None, :, :], axis=2)
        np.fill_diagonal(d, np.inf)
        k = min(3, n - 1)
        nn = np.sort(d, axis=1)[:, :k].mean(axis=1)
    else:
        nn = np.full(n, 0.05)
    scale = np.repeat((0.5 * nn)[:, None], 2, axis=1)
    colors = np.clip(true_scene.colors + rng.normal(0.0, config.init_color_noise, (n, 3)), 0.0, 1.0)
    return Scene(pos, scale, np.zeros(n), np.full(n, float(logit(config.init_opacity))), colors)


def _json_row(row: dict) -> dict:
    # NaN mask metrics (no distractor views) are stored as null
    return {k: (None if isinstance(v, float) and not math.isfinite(v) else v) for k, v in row.items()}


def _row_from_json(row: dict) -> dict:
    return {k: (float("nan") if v is None else v) for k, v in row.items()}


class Trainer:
    """Owns the full training state for one dataset."""

    def __init__(self, dataset: Dataset, config: TrainConfig | None = None, threads: int = 1,
                 scene: Scene | None = None):
        self.dataset = dataset
        self.config = config or TrainConfig()
        self.threads = threads
        self.views = dataset.views
        self.z = self.config.densify_interval or len(self.views)
        self.eval_every = self.config.eval_every or 5 * self.z
        self.scene = initial_scene(dataset.true_scene, self.config) if scene is None else scene.copy()
        self.stats = ObservationStats.zeros(len(self.scene))
        self.n_initial = len(self.scene)

        self.scaler = feature_scaler([view_features(v.image) for v in self.views])
        self.static = [standardize(view_features(v.image), self.scaler) for v in self.views]
        self.textures = [texture_map(v.image) for v in self.views]
        n_static = self.static[0].shape[1]
        mlp_rng = sub_rng(self.config.seed, STREAM_MLP)
        self.uncertainty = UncertaintyHead(n_static, len(self.views), mlp_rng)
        self.mask = MaskHead(n_static, mlp_rng)
        self.unc_opt = Adam(self.uncertainty.params, lr=self.config.lr_heads)
        self.mask_opt = Adam(self.mask.params, lr=self.config.lr_heads)
        self.scene_opt = self._make_scene_optimizer()

        self.shuffle_rng = sub_rng(self.config.seed, STREAM_SHUFFLE)
        self.order: list[int] = []
        self.cache: dict[int, ViewCache] = {}
        self.anchors: anc.ThresholdAnchors | None = None
        self.beta_scale: float | None = None
        self.iteration = 0
        self.grad_accum = np.zeros(len(self.scene))
        self.grad_count = np.zeros(len(self.scene), dtype=np.int64)
        self.history: list[dict] = []
        self.round_losses: list[float] = []
        self._loss_sum = 0.0
        self.pruned_ocp: list[np.ndarray] = []
        # test hooks: force M_c to a constant and/or skip head training
        self.force_mask: float | None = None
        self.train_heads = True

    # -- parameters ---------------------------------------------------------

    def _scene_params(self):
        s = self.scene
        return [s.positions, self._log_scales, s.rotations, s.opacity_logits, s.colors]

    def _make_scene_optimizer(self) -> Adam:
        c = self.config
        self._log_scales = np.log(self.scene.scales)
        return Adam(self._scene_params(), lr=[c.lr_position, c.lr_scale, c.lr_rotation, c.lr_opacity, c.lr_color])

    def disabled(self, name: str) -> bool:
        return name in self.config.disable

    # -- schedule -----------------------------------------------------------

    @property
    def warmup_iters(self) -> int:
        return self.config.warmup_rounds * self.z

    def classifier_active(self) -> bool:
        return self.iteration >= self.warmup_iters and self.anchors is not None

    def masking_active(self) -> bool:
        return self.classifier_active() and not self.disabled("masking")

    def next_view(self) -> int:
        if not self.order:
            self.order = self.shuffle_rng.permutation(len(self.views)).tolist()
        return self.order.pop(0)

    # -- per view quantities -----------------------------------------------

    def current_beta_scale(self, beta) -> float:
        return self.beta_scale if self.beta_scale is not None else beta_scale([beta])

    def predict_beta(self, view_idx: int) -> np.ndarray:
        return self.uncertainty.predict(self.static[view_idx], view_idx)[0]

    def predict_mask(self, view_idx: int, beta=None) -> np.ndarray:
        if beta is None:
            beta = self.predict_beta(view_idx)
        return self.mask.predict(self.static[view_idx], normalize_beta(beta, self.current_beta_scale(beta)))[0]

    def assess_view(self, view_idx: int, rendered, beta, oc_pixels, scale=None):
        return assess(
            rendered,
            self.views[view_idx].image,
            beta,
            self.current_beta_scale(beta) if scale is None else scale,
            oc_pixels,
            texture=self.textures[view_idx],
            use_residual=not self.disabled("residual"),
            use_beta=not self.disabled("hybrid"),
            use_occ=not self.disabled("occ"),
        )

    def _corrected_from_cache(self, view_idx: int, scale: float) -> np.ndarray:
        c = self.cache[view_idx]
        return self.assess_view_from_parts(view_idx, c, scale).corrected

    def assess_view_from_parts(self, view_idx: int, c: ViewCache, scale: float):
        from .assessment import AssessmentMaps, hybrid_map, occ_correct

        b_norm = normalize_beta(c.beta, scale)
        if self.disabled("hybrid"):
            h = c.residual.copy()
        elif self.disabled("residual"):
            h = b_norm.copy()
        else:
            h = hybrid_map(c.residual, b_norm)
        s = self.textures[view_idx]
        if self.disabled("occ"):
            ocr, corrected = np.ones_like(h), h.copy()
        else:
            ocr, corrected = occ_correct(h, c.oc_pixels, s)
        return AssessmentMaps(c.residual, c.beta, h, s, ocr, corrected, c.oc_pixels)

    def view_labels(self, view_idx: int):
        """Self-supervised labels ``(M_self, M_u)`` for a cached view."""
        if self.anchors is None or view_idx not in self.cache:
            return None
        corrected = self._corrected_from_cache(view_idx, self.beta_scale or 1.0)
        return anc.labels_for(corrected, self.anchors)

    # -- the step -----------------------------------------------------------

    def train_step(self, view_idx: int | None = None) -> dict:
        if view_idx is None:
            view_idx = self.next_view()
        view = self.views[view_idx]
        cam = view.camera
        out = render(self.scene, cam, self.stats.oc, self.config.background, self.threads)
        loss, loss_map, grad = gs_loss(out.color, view.image, self.config.lambda_s)
        if not np.isfinite(loss):
            raise NumericalError(f"non-finite loss at iteration {self.iteration}")

        static = self.static[view_idx]
        beta = self.uncertainty.predict(static, view_idx)[0]
        if self.force_mask is not None:
            mc = np.full(cam.width, float(self.force_mask))
        elif self.masking_active():
            mc = self.predict_mask(view_idx, beta)
        else:
            mc = np.ones(cam.width)
        grad = grad * mc[:, None]

        grads = backward(self.scene, cam, out, grad, self.threads)
        grad_p = grads.grad_p
        self._apply_scene_grads(grads)

        u = observe(self.stats, cam.position, grad_p)
        self.grad_accum += np.where(u > 0, grad_p, 0.0)
        self.grad_count += u

        self.cache[view_idx] = ViewCache(
            residual=np.abs(out.color - view.image).mean(axis=1), beta=beta, oc_pixels=out.oc
        )
        if self.train_heads:
            _, g_unc, _ = self.uncertainty.loss_and_grads(static, view_idx, loss_map)
            self.unc_opt.step(self.uncertainty.params, g_unc)
            if self.classifier_active():
                m_self, m_u = self.view_labels(view_idx)
                b_in = normalize_beta(beta, self.current_beta_scale(beta))
                _, g_mask, _ = self.mask.loss_and_grads(static, b_in, m_self, m_u)
                self.mask_opt.step(self.mask.params, g_mask)

        self._loss_sum += loss
        self.iteration += 1
        if self.iteration % self.z == 0:
            self.round_losses.append(self._loss_sum)
            self._loss_sum = 0.0
            self.end_of_round()
        return {"loss": loss, "grads": grads, "u": u, "mask": mc}

    def _apply_scene_grads(self, grads) -> None:
        log_scale_grad = grads.scales * self.scene.scales
        gs = [grads.positions, log_scale_grad, grads.rotations, grads.opacity_logits, grads.colors]
        touched = np.zeros(len(self.scene), dtype=bool)
        for g in gs:
            touched |= np.any(g.reshape(len(self.scene), -1) != 0, axis=1)
        rows = np.flatnonzero(touched)
        if rows.size == 0:
            return
        params = self._scene_params()
        self.scene_opt.step(params, gs, rows=rows)
        self.scene.scales = np.exp(self._log_scales)
        np.clip(self.scene.colors, 0.0, 1.0, out=self.scene.colors)
        if not all(np.all(np.isfinite(p)) for p in params):
            raise NumericalError(f"non-finite primitive parameters at iteration {self.iteration}")

    # -- round boundary -----------------------------------------------------

    def refresh_anchors(self) -> None:
        if not self.cache:
            return
        keys = sorted(self.cache)
        self.beta_scale = beta_scale([self.cache[k].beta for k in keys])
        values = np.concatenate([self._corrected_from_cache(k, self.beta_scale) for k in keys])
        if values.size < anc.MIN_SAMPLES:
            return
        self.anchors = anc.compute_anchors(
            values,
            self.config.lambda4,
            self.config.lambda5,
            force_fixed=self.disabled("dynamic-threshold"),
        )

    def end_of_round(self) -> None:
        self.refresh_anchors()
        self.densify_and_prune()

    def densify_and_prune(self) -> dict:
        cfg = self.config
        n = len(self.scene)
        avg = np.where(self.grad_count > 0, self.grad_accum / np.maximum(self.grad_count, 1), 0.0)
        cand = np.flatnonzero(avg > cfg.densify_grad_threshold)
        capacity = max(0, int(cfg.max_gaussians_factor * self.n_initial) - n)
        if cand.size > capacity:
            cand = cand[np.lexsort((cand, -avg[cand]))][:capacity]
            cand.sort()
        big = self.scene.scales[cand].max(axis=1) > cfg.clone_scale_max if cand.size else np.zeros(0, bool)
        clone_src = cand[~big]
        split_src = cand[big]

        keep = np.ones(n, dtype=bool)
        keep[split_src] = False
        base = np.flatnonzero(keep)
        scene = self.scene.take(base)
        index = base
        if clone_src.size:
            scene = scene.concat(self.scene.take(clone_src))
            index = np.concatenate([index, clone_src])
        if split_src.size:
            parents = self.scene.take(split_src)
            major = np.argmax(parents.scales, axis=1)
            ang = parents.rotations + np.where(major == 1, math.pi / 2, 0.0)
            axis = np.stack([np.cos(ang), np.sin(ang)], 1) * parents.scales.max(axis=1)[:, None]
            for sign in (1.0, -1.0):
                child = parents.copy()
                child.positions = parents.positions + sign * 0.5 * axis
                child.scales = parents.scales / 1.6
                scene = scene.concat(child)
                index = np.concatenate([index, split_src])

        # new rows are those beyond the surviving originals
        n_base = len(base)
        self.stats = self.stats.take(index)
        self.grad_accum = np.zeros(len(index))
        self.grad_count = np.zeros(len(index), dtype=np.int64)
        moments_index = np.concatenate([base, np.full(len(index) - n_base, -1)])
        self.scene = scene
        self._log_scales = np.log(self.scene.scales)
        self.scene_opt.take_rows(moments_index)

        low_opacity = self.scene.opacities < cfg.opacity_prune_threshold
        if self.disabled("ocp"):
            ocp_drop = np.zeros(0, dtype=np.int64)
            self.stats.epoch_observation_count[:] = 0
        else:
            ocp_drop = ocp_prune(self.stats)
        drop = low_opacity.copy()
        drop[ocp_drop] = True
        self.pruned_ocp.append(ocp_drop)
        if drop.any():
            keep_idx = np.flatnonzero(~drop)
            self.stats = self.stats.take(keep_idx)
            self.grad_accum = self.grad_accum[keep_idx]
            self.grad_count = self.grad_count[keep_idx]
            self.scene = self.scene.take(keep_idx)
            self._log_scales = np.log(self.scene.scales)
            self.scene_opt.take_rows(keep_idx)
        return {
            "cloned": int(clone_src.size),
            "split": int(split_src.size),
            "opacity_pruned": int(low_opacity.sum()),
            "ocp_pruned": int(len(ocp_drop)),
        }

    # -- driving and evaluation --------------------------------------------

    def train(self, iterations: int | None = None, callback=None) -> list[dict]:
        total = iterations if iterations is not None else self.config.iterations
        while self.iteration < total:
            self.train_step()
            if self.iteration % self.eval_every == 0 or self.iteration == total:
                row = self.evaluate_row()
                self.history.append(row)
                log.info("iter %d psnr %.2f mask_f1 %.3f n %d", row["iter"], row["psnr"], row["mask_f1"],
                         row["n_gaussians"])
                if callback is not None:
                    callback(self, row)
        return self.history

    def evaluate(self, test_views=None) -> dict:
        test_views = self.dataset.test_views if test_views is None else test_views
        psnrs, ssims = [], []
        for v in test_views:
            img = self.render_view(v)
            psnrs.append(psnr(img, v.image))
            ssims.append(ssim(img, v.image))
        tp = fp = fn = 0
        for i, v in enumerate(self.views):
            if not v.has_distractors:
                continue
            pred = self.predict_mask(i) < 0.5
            tp += int(np.sum(pred & v.gt_mask))
            fp += int(np.sum(pred & ~v.gt_mask))
            fn += int(np.sum(~pred & v.gt_mask))
        if tp + fp + fn == 0:
            iou = f1 = float("nan")
        else:
            iou = tp / (tp + fp + fn)
            f1 = 2 * tp / (2 * tp + fp + fn)
        return {
            "psnr": float(np.mean(psnrs)) if psnrs else float("nan"),
            "ssim": float(np.mean(ssims)) if ssims else float("nan"),
            "psnr_per_view": psnrs,
            "ssim_per_view": ssims,
            "mask_iou": iou,
            "mask_f1": f1,
        }

    def render_view(self, view, with_oc: bool = False):
        out = render(self.scene, view.camera, self.stats.oc, self.config.background, self.threads)
        return (out.color, out.oc) if with_oc else out.color

    def current_maps(self, view_idx: int):
        """Assessment maps of a training view under the current model."""
        color, oc = self.render_view(self.views[view_idx], with_oc=True)
        return self.assess_view(view_idx, color, self.predict_beta(view_idx), oc)

    def evaluate_row(self) -> dict:
        m = self.evaluate()
        return {
            "iter": self.iteration,
            "psnr": m["psnr"],
            "ssim": m["ssim"],
            "mask_iou": m["mask_iou"],
            "mask_f1": m["mask_f1"],
            "n_gaussians": len(self.scene),
        }

    # -- checkpoints --------------------------------------------------------

    def to_checkpoint(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": "checkpoint",
            "iteration": self.iteration,
            "train_config": self.config.to_dict(),
            "primitives": scene_to_dict(self.scene),
            "stats": self.stats.to_dict(),
            "uncertainty_head": self.uncertainty.mlp.to_dict(),
            "id_embedding": self.uncertainty.id_table.tolist(),
            "mask_head": self.mask.mlp.to_dict(),
            "beta_scale": self.beta_scale,
            "anchors": None if self.anchors is None else self.anchors.to_dict(),
            "history": [_json_row(r) for r in self.history],
        }

    @classmethod
    def from_checkpoint(cls, doc: dict, dataset: Dataset, threads: int = 1) -> "Trainer":
        from .classifier import MLP

        check_schema(doc, "checkpoint")
        try:
            t = cls(dataset, TrainConfig.from_dict(doc["train_config"]), threads=threads,
                    scene=scene_from_dict(doc["primitives"]))
            t.stats = ObservationStats.from_dict(doc["stats"])
            t.uncertainty.mlp = MLP.from_dict(doc["uncertainty_head"])
            t.uncertainty.id_table = np.array(doc["id_embedding"], dtype=np.float64)
            t.mask.mlp = MLP.from_dict(doc["mask_head"])
            t.beta_scale = doc["beta_scale"]
            t.anchors = None if doc["anchors"] is None else anc.ThresholdAnchors.from_dict(doc["anchors"])
            t.iteration = int(doc["iteration"])
            t.history = [_row_from_json(r) for r in doc.get("history", [])]
        except (KeyError, TypeError, ValueError) as exc:
            from .scene import SchemaError

            raise SchemaError(f"malformed checkpoint: {exc}") from exc
        if len(t.stats) != len(t.scene):
            from .scene import SchemaError

            raise SchemaError("checkpoint stats and primitives are not aligned")
        t.grad_accum = np.zeros(len(t.scene))
        t.grad_count = np.zeros(len(t.scene), dtype=np.int64)
        t.scene_opt = t._make_scene_optimizer()
        t.unc_opt = Adam(t.uncertainty.params, lr=t.config.lr_heads)
        t.mask_opt = Adam(t.mask.params, lr=t.config.lr_heads)
        return t
