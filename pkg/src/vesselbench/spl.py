"""Self-paced training engine with sparse annotation refinement.

One alternation iteration k:

1. train the model on the current self-paced labels Y weighted by the
   latent weights V (warm start from the previous checkpoint);
2. refresh Y from the model's binary predictions, then restore stored
   annotations on top (annotations always dominate);
3. query the most uncertain unlabeled superpixels per image, obtain
   annotations, merge them into the store, write their labels into Y and
   raise their weights to omega;
4. recompute V: rank each image's per-pixel losses ascending and keep
   pixels under the rank-dependent pace threshold, then restore omega on
   annotated pixels;
5. evaluate validation dice and stop once its increment falls below the
   configured threshold (or at the iteration cap).

Run modes: ``arspl`` runs all steps; ``noar`` skips step 3; ``nospl``
skips 2 and 4 (after a pseudo-label warm start it trains on annotated
pixels only); ``ns``/``fs`` are single training runs on pseudo labels /
ground truth; ``pl`` evaluates the pseudo labels directly.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .core import GrayImage, LabelGrid, evaluate_mask
from .layersep import VesselnessMap
from .rng import stream_key
from .segmodel import (
    SegModel,
    TrainHyper,
    binarize,
    init_model,
    load_checkpoint,
    loss_and_grad,
    mcdo_expectation,
    predict_proba,
    save_checkpoint,
    train_weighted,
)
from .suggest import (
    AnnotationRequest,
    AnnotationSet,
    AnnotationStore,
    Annotator,
    QueryBatch,
    annotated_pixel_fraction,
    materialize_store,
    merge_annotations,
    select_queries,
)
from .superpixel import SuperpixelPartition
from .uncertainty import eta, fuse_mvu, model_uncertainty, vesselness_uncertainty

MODES = ("arspl", "noar", "nospl", "ns", "fs", "pl")


class SuspendRequested(Exception):
    """Raised by an annotator to checkpoint and stop the run loop."""


@dataclass(frozen=True)
class PaceParams:
    tau: float
    gamma: float


@dataclass(frozen=True)
class SplConfig:
    tau0: float = 0.75
    gamma0: float = 0.20
    mu: float = 0.01
    omega: float = 5.0
    stop_dice_increment: float = 5e-4
    max_alt_iters: int = 20
    mode: str = "arspl"
    n_b: int = 8
    theta: float = 0.4
    mcdo_passes: int = 20
    pace_eps: float = 1e-3
    entropy: str = "single"
    hyper: TrainHyper = field(default_factory=TrainHyper)
    # From-scratch training (iteration 1 and the ns/fs baselines) needs a
    # hotter schedule to escape the all-background basin than the warm
    # refinement iterations tolerate; None reuses `hyper`.
    warmup_hyper: TrainHyper | None = None
    baseline_steps: int | None = None  # ns/fs single-run budget; None -> 4x max_steps
    channel_widths: tuple[int, int, int] = (8, 16, 32)
    dropout_rate: float = 0.2
    inference_precision: str = "f64"

    def __post_init__(self):
        if self.tau0 <= 0 or self.gamma0 <= 0 or self.mu <= 0:
            raise ValueError("pace constants must be positive")
        if self.omega <= 1:
            raise ValueError("omega must exceed 1")
        if self.stop_dice_increment <= 0:
            raise ValueError("stop_dice_increment must be positive")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.n_b < 0:
            raise ValueError("n_b must be >= 0")


@dataclass(frozen=True, eq=False)
class LatentWeights:
    v: np.ndarray  # (h, w) in [0, 1], or omega where annotated
    annotated_mask: np.ndarray  # (h, w) bool


def init_latent_weights(vmap: VesselnessMap) -> LatentWeights:
    """Soft threshold on the vesselness map: v = min(4 |s - 0.5|, 1).

    Confident pixels (vesselness near 0 or 1) start with full weight;
    ambiguous mid-range pixels start near zero.
    """
    v = np.minimum(4.0 * np.abs(vmap.values - 0.5), 1.0)
    return LatentWeights(v, np.zeros_like(v, dtype=bool))


def pace_params(k: int, cfg: SplConfig) -> PaceParams:
    """Logarithmically growing pace; log arguments clamp at pace_eps."""
    if k < 1:
        raise ValueError("iteration index starts at 1")
    tau = -np.log(max(cfg.tau0 - cfg.mu * k, cfg.pace_eps))
    gamma = -np.log(max(cfg.gamma0 - cfg.mu * k, cfg.pace_eps))
    return PaceParams(float(tau), float(gamma))


def spld_assign(losses: np.ndarray, pace: PaceParams) -> np.ndarray:
    """Binary latent weights: rank losses ascending, keep rank o while
    ``loss < tau + gamma / (sqrt(o) + sqrt(o - 1))``.

    Stable sort breaks loss ties by original index; the result is the exact
    minimizer of the per-image objective
    ``sum(v * loss) - tau ||v||_1 - gamma ||v||_2`` over binary v.
    """
    losses = np.asarray(losses, dtype=np.float64)
    if losses.ndim != 1:
        raise ValueError("losses must be a flat vector")
    if losses.size == 0:
        return np.zeros(0)
    order = np.argsort(losses, kind="stable")
    ranks = np.arange(1, losses.size + 1, dtype=np.float64)
    thresholds = pace.tau + pace.gamma / (np.sqrt(ranks) + np.sqrt(ranks - 1.0))
    selected_sorted = losses[order] < thresholds
    weights = np.zeros(losses.size)
    weights[order[selected_sorted]] = 1.0
    return weights


def update_self_paced_labels(
    model: SegModel,
    image: GrayImage,
    annotated_mask: np.ndarray | None = None,
    annotated_labels: np.ndarray | None = None,
    precision: str = "f64",
) -> LabelGrid:
    """Binary forward-pass labels, overridden by stored annotations."""
    labels = binarize(predict_proba(model, image, precision).values)
    if annotated_mask is not None:
        labels = np.where(annotated_mask, annotated_labels, labels)
    return LabelGrid(labels)


# ---------------------------------------------------------------------------
# run state

@dataclass
class ImageState:
    image_id: str
    image: GrayImage
    vesselness: VesselnessMap
    partition: SuperpixelPartition
    pseudo: LabelGrid
    truth: LabelGrid | None
    labels: LabelGrid  # self-paced labels Y
    weights: np.ndarray  # latent v, omega on annotated pixels
    annotated_mask: np.ndarray
    annotated_labels: np.ndarray
    store: AnnotationStore = field(default_factory=AnnotationStore)


@dataclass
class TrainState:
    images: dict[str, ImageState]
    model: SegModel
    omega: float = 5.0
    iteration: int = 0
    dice_history: list[float] = field(default_factory=list)
    grad_norm_history: list[float] = field(default_factory=list)
    prev_val_dice: float | None = None
    stopped: str | None = None  # converged | max_iters | suspended
    best_val_dice: float = -1.0
    best_model: SegModel | None = None  # validation-selected checkpoint
    best_iteration: int = 0


def apply_refinement(state: TrainState, image_id: str, annotations: AnnotationSet) -> TrainState:
    """Merge annotations for one image: labels into Y, weights to omega.

    Rejects annotations for superpixels already in the store and payloads
    that do not cover whole superpixels.
    """
    img = state.images[image_id]
    img.store = merge_annotations(img.store, annotations, img.partition)
    mask, labels = materialize_store(img.store, img.partition)
    img.annotated_mask = mask
    img.annotated_labels = labels
    img.labels = LabelGrid(np.where(mask, labels, img.labels.labels).astype(np.uint8))
    weights = img.weights.copy()
    weights[mask] = state.omega
    img.weights = weights
    return state


@dataclass(frozen=True)
class RunReport:
    mode: str
    iterations: int
    dice_history: tuple[float, ...]
    annotated_superpixels: int
    annotated_pixel_fraction: float
    test_metrics: dict
    grad_norm_history: tuple[float, ...]
    stable: bool

    def to_json(self) -> dict:
        return {
            "mode": self.mode,
            "iterations": self.iterations,
            "dice_history": list(self.dice_history),
            "annotated_superpixels": self.annotated_superpixels,
            "annotated_pixel_fraction": self.annotated_pixel_fraction,
            "test_metrics": self.test_metrics,
            "grad_norm_history": list(self.grad_norm_history),
            "stable": self.stable,
        }


@dataclass
class RunOutcome:
    status: str  # converged | max_iters | suspended | done
    model: SegModel | None
    report: RunReport | None


def report_bytes(report: RunReport) -> bytes:
    """Canonical report serialization; used verbatim by CLI and service."""
    return (json.dumps(report.to_json(), indent=2) + "\n").encode("utf-8")


def config_to_json(cfg: SplConfig) -> dict:
    obj = asdict(cfg)
    obj["channel_widths"] = list(cfg.channel_widths)
    return obj


def config_from_json(obj: dict) -> SplConfig:
    data = dict(obj)
    kwargs = {}
    hyper = data.pop("hyper", None)
    if hyper is not None:
        kwargs["hyper"] = TrainHyper(**hyper)
    warmup = data.pop("warmup_hyper", None)
    if warmup is not None:
        kwargs["warmup_hyper"] = TrainHyper(**warmup)
    if "channel_widths" in data:
        data["channel_widths"] = tuple(data["channel_widths"])
    kwargs.update(data)
    return SplConfig(**kwargs)


# ---------------------------------------------------------------------------
# run engine

_CE_TINY = 1e-12


def _cross_entropy(prob_fg: np.ndarray, labels: np.ndarray) -> np.ndarray:
    p_true = np.where(labels == 1, prob_fg, 1.0 - prob_fg)
    return -np.log(np.clip(p_true, _CE_TINY, None))


class TrainingRun:
    """One training session over a dataset bundle.

    Persists a resumable snapshot after every completed iteration when a
    checkpoint directory is given; a fresh instance pointed at the same
    directory continues with an identical trajectory (all randomness is
    keyed by (seed, iteration), never by global stream position).
    """

    def __init__(self, bundle, cfg: SplConfig, annotator: Annotator | None, seed: int, checkpoint_dir: str | Path | None = None):
        if cfg.mode not in ("pl",) and not bundle.train:
            raise ValueError("bundle has no training images")
        for rec in bundle.val + bundle.test:
            if rec.truth is None:
                raise ValueError(f"{rec.image_id}: validation/test images need ground truth")
        if cfg.mode == "fs":
            for rec in bundle.train:
                if rec.truth is None:
                    raise ValueError("fs mode needs ground truth for all training images")
        if cfg.mode in ("arspl", "nospl") and cfg.n_b > 0 and annotator is None:
            raise ValueError("annotation-refining modes need an annotator")
        self.bundle = bundle
        self.cfg = cfg
        self.annotator = annotator
        self.seed = seed
        self.checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir else None
        self.stop_requested = False
        self._vessel_unc = {rec.image_id: vesselness_uncertainty(rec.vesselness) for rec in bundle.train}
        if self.checkpoint_dir and (self.checkpoint_dir / "state.json").exists():
            self.state = self._load_state()
        else:
            self.state = self._fresh_state()

    # -- state setup ---------------------------------------------------

    def _fresh_state(self) -> TrainState:
        cfg = self.cfg
        model = init_model(stream_key(self.seed, "model-init"), cfg.dropout_rate, cfg.channel_widths)
        images: dict[str, ImageState] = {}
        for rec in self.bundle.train:
            shape = rec.image.data.shape
            if cfg.mode == "nospl":
                weights = np.ones(shape)
            else:
                weights = init_latent_weights(rec.vesselness).v
            images[rec.image_id] = ImageState(
                image_id=rec.image_id,
                image=rec.image,
                vesselness=rec.vesselness,
                partition=rec.partition,
                pseudo=rec.pseudo,
                truth=rec.truth,
                labels=rec.pseudo,
                weights=weights,
                annotated_mask=np.zeros(shape, dtype=bool),
                annotated_labels=np.zeros(shape, dtype=np.uint8),
            )
        return TrainState(images=images, model=model, omega=cfg.omega)

    # -- evaluation helpers --------------------------------------------

    def _predict(self, model: SegModel, image: GrayImage) -> np.ndarray:
        return predict_proba(model, image, self.cfg.inference_precision).values

    def _val_dice(self, model: SegModel) -> float:
        scores = [
            evaluate_mask(LabelGrid(binarize(self._predict(model, rec.image))), rec.truth).dice
            for rec in self.bundle.val
        ]
        return float(np.mean(scores)) if scores else 0.0

    def _test_metrics(self, model: SegModel) -> dict:
        reports = [
            evaluate_mask(LabelGrid(binarize(self._predict(model, rec.image))), rec.truth)
            for rec in self.bundle.test
        ]
        return _mean_metrics(reports)

    def _grad_norm(self, state: TrainState) -> float:
        """Norm of the full-objective gradient at the current checkpoint."""
        ids = list(state.images)
        xs = np.stack([state.images[i].image.data[..., None] for i in ids])
        ys = np.stack([state.images[i].labels.labels for i in ids])
        vs = np.stack([state.images[i].weights for i in ids])
        dtype = np.float32 if self.cfg.hyper.precision == "f32" else np.float64
        params = {k: p.astype(dtype) for k, p in state.model.params.items()}
        _, grads, _ = loss_and_grad(params, state.model.channel_widths, xs.astype(dtype), ys, vs, self.cfg.hyper.lam)
        return float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values())))

    # -- one alternation iteration ---------------------------------------

    def step(self) -> TrainState:
        state, cfg = self.state, self.cfg
        k = state.iteration + 1
        ids = list(state.images)

        # (1) weighted training on current (Y, V), warm start
        hyper = cfg.warmup_hyper if (k == 1 and cfg.warmup_hyper is not None) else cfg.hyper
        state.model = train_weighted(
            state.model,
            [state.images[i].image for i in ids],
            [state.images[i].labels for i in ids],
            [state.images[i].weights for i in ids],
            hyper,
            stream_key(self.seed, "train", k),
        )

        probs = {i: self._predict(state.model, state.images[i].image) for i in ids}
        preds = {i: binarize(probs[i]) for i in ids}

        # (2) self-paced label update, annotations dominate
        if cfg.mode != "nospl":
            for i in ids:
                img = state.images[i]
                img.labels = LabelGrid(np.where(img.annotated_mask, img.annotated_labels, preds[i]).astype(np.uint8))

        # (3) suggestive annotation and refinement
        if cfg.mode != "noar" and cfg.n_b > 0:
            eta_k = eta(k, cfg.theta)
            requests = []
            for idx, i in enumerate(ids):
                img = state.images[i]
                expect = mcdo_expectation(
                    state.model, img.image, cfg.mcdo_passes,
                    stream_key(self.seed, "mcdo", k, idx), cfg.inference_precision,
                )
                model_u = model_uncertainty(expect, cfg.entropy)
                fused = fuse_mvu(model_u, self._vessel_unc[i], eta_k, img.partition)
                batch = select_queries(fused, img.store.superpixel_ids, cfg.n_b, i, k)
                if batch.superpixel_ids:
                    requests.append(AnnotationRequest(batch, img.partition, img.image, LabelGrid(preds[i])))
            if requests:
                annotations = self.annotator.annotate_iteration(requests)
                _check_annotations_match(requests, annotations)
                for annotation in annotations:
                    apply_refinement(state, annotation.image_id, annotation)

        # (4) latent weights from per-pixel losses, omega on annotated
        if cfg.mode != "nospl":
            pace = pace_params(k, cfg)
            for i in ids:
                img = state.images[i]
                ce = _cross_entropy(probs[i], img.labels.labels)
                weights = spld_assign(ce.ravel(), pace).reshape(ce.shape)
                weights[img.annotated_mask] = cfg.omega
                img.weights = weights
        else:
            for i in ids:
                img = state.images[i]
                img.weights = np.where(img.annotated_mask, cfg.omega, 0.0)

        # (5) validation dice and stopping rule
        val = self._val_dice(state.model)
        state.grad_norm_history.append(self._grad_norm(state))
        state.dice_history.append(val)
        state.iteration = k
        if val > state.best_val_dice:
            state.best_val_dice = val
            state.best_model = state.model
            state.best_iteration = k
        if state.prev_val_dice is not None and (val - state.prev_val_dice) < cfg.stop_dice_increment:
            state.stopped = "converged"
        elif k >= cfg.max_alt_iters:
            state.stopped = "max_iters"
        state.prev_val_dice = val
        return state

    # -- full runs -------------------------------------------------------

    def run(self) -> RunOutcome:
        cfg = self.cfg
        if cfg.mode == "pl":
            reports = [evaluate_mask(rec.pseudo, rec.truth) for rec in self.bundle.test]
            report = RunReport(cfg.mode, 0, (), 0, 0.0, _mean_metrics(reports), (), True)
            return RunOutcome("done", None, report)
        if cfg.mode in ("ns", "fs"):
            return self._run_baseline()

        state = self.state
        while state.stopped is None:
            if self.stop_requested:
                return RunOutcome("suspended", state.model, None)
            try:
                self.step()
            except SuspendRequested:
                return RunOutcome("suspended", state.model, None)
            self._persist()
        report = self._final_report(state)
        return RunOutcome(state.stopped, self._selected_model(state), report)

    def _run_baseline(self) -> RunOutcome:
        cfg, state = self.cfg, self.state
        ids = list(state.images)
        base = cfg.warmup_hyper if cfg.warmup_hyper is not None else cfg.hyper
        steps = cfg.baseline_steps if cfg.baseline_steps is not None else 4 * base.max_steps
        hyper = replace(base, max_steps=steps)
        labels = [
            state.images[i].truth if cfg.mode == "fs" else state.images[i].pseudo
            for i in ids
        ]
        ones = [np.ones(state.images[i].image.data.shape) for i in ids]
        state.model = train_weighted(
            state.model, [state.images[i].image for i in ids], labels, ones, hyper,
            stream_key(self.seed, "train", 1),
        )
        for i, lab in zip(ids, labels):
            state.images[i].labels = lab
            state.images[i].weights = np.ones(state.images[i].image.data.shape)
        state.dice_history.append(self._val_dice(state.model))
        state.grad_norm_history.append(self._grad_norm(state))
        state.iteration = 1
        state.stopped = "converged"
        state.best_val_dice = state.dice_history[-1]
        state.best_model = state.model
        state.best_iteration = 1
        report = self._final_report(state)
        return RunOutcome("done", state.model, report)

    def _selected_model(self, state: TrainState) -> SegModel:
        return state.best_model if state.best_model is not None else state.model

    def _final_report(self, state: TrainState) -> RunReport:
        stores = {i: st.store for i, st in state.images.items()}
        parts = {i: st.partition for i, st in state.images.items()}
        n_annotated = sum(len(st.store.superpixel_ids) for st in state.images.values())
        gn = state.grad_norm_history
        stable = True
        if gn:
            window = gn[-5:]
            stable = gn[-1] <= 10.0 * float(np.median(window))
        return RunReport(
            mode=self.cfg.mode,
            iterations=state.iteration,
            dice_history=tuple(state.dice_history),
            annotated_superpixels=n_annotated,
            annotated_pixel_fraction=annotated_pixel_fraction(stores, parts) if n_annotated else 0.0,
            test_metrics=self._test_metrics(self._selected_model(state)),
            grad_norm_history=tuple(gn),
            stable=stable,
        )

    # -- persistence -----------------------------------------------------

    def _persist(self) -> None:
        if self.checkpoint_dir is None:
            return
        save_train_state(self.state, self.checkpoint_dir)

    def _load_state(self) -> TrainState:
        return load_train_state(self.checkpoint_dir, self.bundle, self.cfg)


def _check_annotations_match(requests: list[AnnotationRequest], annotations: list[AnnotationSet]) -> None:
    got = {a.image_id: a for a in annotations}
    for req in requests:
        ann = got.get(req.batch.image_id)
        if ann is None:
            raise ValueError(f"annotator returned nothing for {req.batch.image_id}")
        if tuple(sorted(i for i, _ in ann.superpixels)) != tuple(sorted(req.batch.superpixel_ids)):
            raise ValueError(f"annotation does not cover the queried batch for {req.batch.image_id}")


def _mean_metrics(reports) -> dict:
    if not reports:
        return {"recall": 0.0, "precision": 0.0, "dice": 0.0}
    return {
        "recall": float(np.mean([r.recall for r in reports])),
        "precision": float(np.mean([r.precision for r in reports])),
        "dice": float(np.mean([r.dice for r in reports])),
    }


def save_train_state(state: TrainState, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ids = list(state.images)
    arrays = {}
    for idx, i in enumerate(ids):
        img = state.images[i]
        arrays[f"{idx}_labels"] = img.labels.labels
        arrays[f"{idx}_weights"] = img.weights
        arrays[f"{idx}_mask"] = img.annotated_mask
        arrays[f"{idx}_annotated"] = img.annotated_labels
    np.savez(directory / "arrays.npz", **arrays)
    save_checkpoint(state.model, directory / "model.ckpt")
    if state.best_model is not None:
        save_checkpoint(state.best_model, directory / "best.ckpt")
    meta = {
        "iteration": state.iteration,
        "omega": state.omega,
        "prev_val_dice": state.prev_val_dice,
        "dice_history": state.dice_history,
        "grad_norm_history": state.grad_norm_history,
        "stopped": state.stopped,
        "best_val_dice": state.best_val_dice,
        "best_iteration": state.best_iteration,
        "image_ids": ids,
        "stores": {i: sorted(state.images[i].store.superpixel_ids) for i in ids},
    }
    tmp = directory / "state.json.tmp"
    tmp.write_text(json.dumps(meta, indent=2))
    tmp.replace(directory / "state.json")


def load_train_state(directory: str | Path, bundle, cfg: SplConfig) -> TrainState:
    directory = Path(directory)
    meta = json.loads((directory / "state.json").read_text())
    arrays = np.load(directory / "arrays.npz")
    model = load_checkpoint(directory / "model.ckpt")
    records = {rec.image_id: rec for rec in bundle.train}
    images: dict[str, ImageState] = {}
    for idx, image_id in enumerate(meta["image_ids"]):
        rec = records[image_id]
        mask = arrays[f"{idx}_mask"]
        annotated = arrays[f"{idx}_annotated"]
        store = AnnotationStore({
            sp_id: annotated.ravel()[rec.partition.members(sp_id)].astype(np.uint8)
            for sp_id in meta["stores"][image_id]
        })
        images[image_id] = ImageState(
            image_id=image_id,
            image=rec.image,
            vesselness=rec.vesselness,
            partition=rec.partition,
            pseudo=rec.pseudo,
            truth=rec.truth,
            labels=LabelGrid(arrays[f"{idx}_labels"]),
            weights=arrays[f"{idx}_weights"],
            annotated_mask=mask,
            annotated_labels=annotated,
            store=store,
        )
    best_path = directory / "best.ckpt"
    return TrainState(
        images=images,
        model=model,
        omega=meta["omega"],
        iteration=meta["iteration"],
        dice_history=list(meta["dice_history"]),
        grad_norm_history=list(meta["grad_norm_history"]),
        prev_val_dice=meta["prev_val_dice"],
        stopped=meta["stopped"],
        best_val_dice=meta.get("best_val_dice", -1.0),
        best_model=load_checkpoint(best_path) if best_path.exists() else None,
        best_iteration=meta.get("best_iteration", 0),
    )


def arspl_run(bundle, cfg: SplConfig, annotator: Annotator | None, seed: int, checkpoint_dir: str | Path | None = None) -> RunOutcome:
    """Convenience wrapper: construct a run (resuming if possible) and drive it."""
    return TrainingRun(bundle, cfg, annotator, seed, checkpoint_dir).run()
