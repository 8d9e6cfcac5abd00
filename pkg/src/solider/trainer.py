"""Two-phase training loop, loss combination, and checkpointed state.

Phase one trains the plain teacher-student objective with controllers frozen
at identity. Phase two resumes at a tenth of the learning rate, samples a
ratio value per iteration, derives pseudo labels from the teacher, and adds
the semantic loss weighted by alpha and lambda. Every stochastic choice runs
through named RNG streams stored in the state, so a checkpoint resumes
bit-exactly.
"""

from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .backbone import Backbone, BackboneConfig, global_pool
from .checkpoint import load_tensors, save_tensors
from .config import RunConfig
from .controller import check_lambda
from .labeler import make_labels
from .nn import Module
from .semantic import SemanticHead, masked_refeed_loss
from .ssl import AugConfig, ProjectionHead, center_update, dino_loss, ema_update, make_views
from .tensor import Tensor

RNG_STREAMS = ("init", "teacher_init", "data", "aug", "lam", "label", "mask")


@dataclass
class LambdaDistribution:
    """How the per-iteration ratio value is drawn."""

    kind: str
    params: tuple = ()

    @classmethod
    def parse(cls, text: str) -> "LambdaDistribution":
        name, _, arg = text.partition(":")
        name = name.strip().lower()
        params = tuple(float(p) for p in arg.split(",") if p.strip())
        if name == "bernoulli":
            p = params[0] if params else 0.5
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"bernoulli p must be in [0,1], got {p}")
            return cls("bernoulli", (p,))
        if name == "uniform":
            return cls("uniform")
        if name == "beta":
            if len(params) != 2 or params[0] <= 0 or params[1] <= 0:
                raise ValueError(f"beta needs two positive shapes, got {params}")
            return cls("beta", params)
        if name == "fixed":
            v = params[0] if params else 0.0
            return cls("fixed", (check_lambda(v),))
        raise ValueError(f"unknown lambda distribution '{name}'")

    def sample(self, rng: np.random.Generator) -> float:
        if self.kind == "bernoulli":
            return float(rng.random() < self.params[0])
        if self.kind == "uniform":
            return float(rng.random())
        if self.kind == "beta":
            return float(rng.beta(*self.params))
        return self.params[0]


def sample_lambda(dist: LambdaDistribution, rng: np.random.Generator) -> float:
    return check_lambda(dist.sample(rng))


def total_loss(l_dino: Tensor, l_sm, lam: float, alpha: float, phase: str) -> Tensor:
    """Phase 'dino' returns l_dino; 'solider' returns alpha*l_dino + lam*(1-alpha)*l_sm."""
    if phase == "dino":
        return l_dino
    if phase != "solider":
        raise ValueError(f"unknown phase '{phase}'")
    lam = check_lambda(lam)
    base = T.scalar_mul(l_dino, alpha)
    if lam == 0.0 or l_sm is None:
        return base
    return T.add(base, T.scalar_mul(l_sm, lam * (1.0 - alpha)))


def cosine_lr(step: int, total_steps: int, lr_max: float, lr_min: float) -> float:
    frac = min(1.0, step / max(1, total_steps))
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * frac))


class SGD:
    """Momentum SGD with weight decay; velocities keyed by parameter name.

    `lr_scales` holds optional per-parameter rate multipliers (parameters not
    listed use the plain rate).
    """

    def __init__(self, named_params: dict, momentum: float = 0.9, weight_decay: float = 1e-4,
                 lr_scales: dict | None = None):
        self.params = dict(named_params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.lr_scales = dict(lr_scales or {})
        self.velocity = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self, lr: float):
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data
            v = self.velocity[name]
            v *= self.momentum
            v += g
            p.data -= (lr * self.lr_scales.get(name, 1.0) * v).astype(p.data.dtype)


class StudentModel(Module):
    def __init__(self, cfg: RunConfig, rng: np.random.Generator):
        super().__init__()
        bcfg = BackboneConfig(
            patch_size=cfg.patch_size, embed_dim=cfg.embed_dim, depths=tuple(cfg.depths),
            heads=tuple(cfg.heads), window_size=cfg.window_size, mlp_ratio=cfg.mlp_ratio,
            shifted_windows=cfg.shifted_windows, controller_hidden=cfg.controller_hidden,
        )
        self.backbone = Backbone(bcfg, (cfg.image_height, cfg.image_width), rng)
        self.dino_head = ProjectionHead(bcfg.out_dim, rng, hidden=cfg.proj_hidden,
                                        bottleneck=cfg.proj_bottleneck, prototypes=cfg.prototypes)
        self.semantic_head = SemanticHead(bcfg.out_dim, cfg.parts + 1, rng,
                                          hidden=cfg.head_hidden, blocks=cfg.head_blocks)


class TeacherModel(Module):
    def __init__(self, cfg: RunConfig, rng: np.random.Generator):
        super().__init__()
        bcfg = BackboneConfig(
            patch_size=cfg.patch_size, embed_dim=cfg.embed_dim, depths=tuple(cfg.depths),
            heads=tuple(cfg.heads), window_size=cfg.window_size, mlp_ratio=cfg.mlp_ratio,
            shifted_windows=cfg.shifted_windows, controller_hidden=cfg.controller_hidden,
        )
        self.backbone = Backbone(bcfg, (cfg.image_height, cfg.image_width), rng)
        self.dino_head = ProjectionHead(bcfg.out_dim, rng, hidden=cfg.proj_hidden,
                                        bottleneck=cfg.proj_bottleneck, prototypes=cfg.prototypes)


@dataclass
class LossReport:
    step: int
    phase: str
    lam: float
    l_dino: float
    l_sm: float
    total: float
    lr: float
    degenerate_count: int


@dataclass
class TrainState:
    config: RunConfig
    student: StudentModel
    teacher: TeacherModel
    center: np.ndarray
    rngs: dict
    optimizer: SGD | None = None
    phase: str = "dino"
    epoch: int = 0
    global_step: int = 0
    phase_step: int = 0
    phase_total: int = 0
    perm: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    cursor: int = 0
    reports: list = field(default_factory=list)


def build_state(config: RunConfig) -> TrainState:
    root = np.random.default_rng(config.seed)
    rngs = dict(zip(RNG_STREAMS, root.spawn(len(RNG_STREAMS))))
    student = StudentModel(config, rngs["init"])
    teacher = TeacherModel(config, rngs["teacher_init"])
    # teacher starts as an exact copy of the student
    student_state = student.state_arrays()
    teacher.load_state_arrays({k: v for k, v in student_state.items()
                               if not k.startswith("semantic_head.")})
    center = np.zeros(config.prototypes, dtype=T.get_default_dtype())
    return TrainState(config=config, student=student, teacher=teacher,
                      center=center, rngs=rngs)


def _is_fresh(name: str) -> bool:
    """Parameters first trained in phase 2 (everything else is DINO-pretrained)."""
    return ".controllers." in name or name.startswith("semantic_head.")


def _phase_params(state: TrainState) -> dict:
    """Phase 1 leaves controllers and the semantic head out of the optimizer."""
    params = dict(state.student.named_parameters())
    if state.phase == "dino":
        params = {name: p for name, p in params.items() if not _is_fresh(name)}
    return params


def _lr_scales(state: TrainState, params: dict) -> dict:
    """Fresh modules run lr_fresh_mult times faster in phase 2; they start at
    zero-init identity and a fine-tuning rate sized for the pretrained
    backbone would leave them frozen at desk-scale step counts."""
    if state.phase != "solider":
        return {}
    return {name: state.config.lr_fresh_mult for name in params if _is_fresh(name)}


def _start_phase(state: TrainState, phase: str, images_len: int):
    cfg = state.config
    state.phase = phase
    state.phase_step = 0
    state.cursor = 0
    state.perm = np.zeros(0, dtype=np.int64)
    epochs = cfg.epochs_dino if phase == "dino" else cfg.epochs_solider
    steps_per_epoch = math.ceil(images_len / cfg.batch_size)
    state.phase_total = epochs * steps_per_epoch
    params = _phase_params(state)
    state.optimizer = SGD(params, momentum=cfg.momentum,
                          weight_decay=cfg.weight_decay,
                          lr_scales=_lr_scales(state, params))


def _aug_config(cfg: RunConfig) -> AugConfig:
    return AugConfig(crop_scale_min=cfg.crop_scale_min, crop_scale_max=cfg.crop_scale_max,
                     hflip_prob=cfg.hflip_prob, jitter=cfg.color_jitter)


def train_step(state: TrainState, batch: np.ndarray, lam: float, lr: float) -> LossReport:
    """One full iteration: views, forwards, loss, update, EMA, centering."""
    cfg = state.config
    student, teacher = state.student, state.teacher
    v1, v2 = make_views(batch, _aug_config(cfg), state.rngs["aug"])

    with T.no_grad():
        t_fm1 = teacher.backbone(v1, lam)
        t_fm2 = teacher.backbone(v2, lam)
        t1 = teacher.dino_head(global_pool(t_fm1))
        t2 = teacher.dino_head(global_pool(t_fm2))

    s_fm1 = student.backbone(v1, lam)
    s_fm2 = student.backbone(v2, lam)
    s1 = student.dino_head(global_pool(s_fm1))
    s2 = student.dino_head(global_pool(s_fm2))
    l_dino = T.scalar_mul(
        T.add(dino_loss(s1, t2, state.center, cfg.temp_student, cfg.temp_teacher),
              dino_loss(s2, t1, state.center, cfg.temp_student, cfg.temp_teacher)),
        0.5,
    )

    l_sm = None
    degenerate_count = 0
    if state.phase == "solider" and lam > 0.0:
        labels = make_labels(t_fm1, cfg.parts, seed=state.rngs["label"])
        l_sm, degenerate_count = masked_refeed_loss(
            student.backbone, student.semantic_head, v1, labels, lam,
            state.rngs["mask"], mask_enabled=cfg.mask_enabled, fm=s_fm1,
        )

    total = total_loss(l_dino, l_sm, lam, cfg.alpha, state.phase)
    total_val = total.item()
    if not np.isfinite(total_val):
        raise FloatingPointError(
            f"non-finite loss at step {state.global_step}: "
            f"l_dino={l_dino.item()}, l_sm={None if l_sm is None else l_sm.item()}, lam={lam}")
    if state.phase == "solider":
        # combined loss must match its definition to float32 rounding
        ls = 0.0 if l_sm is None else l_sm.item()
        expected = float(np.float32(cfg.alpha) * np.float32(l_dino.item())
                         + np.float32(lam * (1.0 - cfg.alpha)) * np.float32(ls))
        assert abs(total_val - expected) < 1e-6, (total_val, expected)

    state.optimizer.zero_grad()
    state.student.zero_grad()
    total.backward()
    state.optimizer.step(lr)
    ema_update(teacher.backbone, student.backbone, cfg.ema_momentum)
    ema_update(teacher.dino_head, student.dino_head, cfg.ema_momentum)
    state.center = center_update(state.center, np.vstack([t1.numpy(), t2.numpy()]),
                                 cfg.center_momentum)

    return LossReport(
        step=state.global_step, phase=state.phase, lam=lam,
        l_dino=float(l_dino.item()), l_sm=0.0 if l_sm is None else float(l_sm.item()),
        total=float(total_val), lr=lr, degenerate_count=degenerate_count,
    )


METRICS_COLUMNS = ("step", "lambda", "l_dino", "l_sm", "total", "lr", "degenerate_count")


class MetricsWriter:
    """Appends one CSV row per step."""

    def __init__(self, path: str):
        self.path = path
        self._fh = open(path, "a", newline="")
        self._writer = csv.writer(self._fh)
        if self._fh.tell() == 0:
            self._writer.writerow(METRICS_COLUMNS)

    def write(self, report: LossReport):
        self._writer.writerow([report.step, report.lam, report.l_dino, report.l_sm,
                               report.total, report.lr, report.degenerate_count])
        self._fh.flush()

    def close(self):
        self._fh.close()


def train_steps(state: TrainState, images: np.ndarray, n_steps: int,
                metrics: MetricsWriter | None = None) -> list:
    """Run n more iterations from wherever the state currently stands."""
    cfg = state.config
    dist = LambdaDistribution.parse(cfg.lambda_dist)
    lr_max = cfg.lr if state.phase == "dino" else cfg.lr_solider
    reports = []
    for _ in range(n_steps):
        if state.cursor >= len(state.perm):
            state.perm = state.rngs["data"].permutation(len(images))
            state.cursor = 0
            state.epoch += 1
        idx = state.perm[state.cursor:state.cursor + cfg.batch_size]
        state.cursor += cfg.batch_size
        lam = sample_lambda(dist, state.rngs["lam"]) if state.phase == "solider" else 0.0
        lr = cosine_lr(state.phase_step, state.phase_total, lr_max, cfg.lr_min)
        report = train_step(state, images[idx], lam, lr)
        state.phase_step += 1
        state.global_step += 1
        state.reports.append(report)
        reports.append(report)
        if metrics is not None:
            metrics.write(report)
    return reports


def pretrain_dino(config: RunConfig, images: np.ndarray,
                  metrics: MetricsWriter | None = None) -> TrainState:
    if len(images) == 0:
        raise ValueError("dataset is empty")
    state = build_state(config)
    _start_phase(state, "dino", len(images))
    train_steps(state, images, state.phase_total, metrics)
    return state


def finetune_solider(state: TrainState, images: np.ndarray,
                     metrics: MetricsWriter | None = None) -> TrainState:
    if len(images) == 0:
        raise ValueError("dataset is empty")
    _start_phase(state, "solider", len(images))
    train_steps(state, images, state.phase_total, metrics)
    return state


# -- persistence ---------------------------------------------------------------


def save_train_state(state: TrainState, path: str) -> None:
    tensors = {}
    for name, arr in state.student.state_arrays().items():
        tensors["student/" + name] = arr
    for name, arr in state.teacher.state_arrays().items():
        tensors["teacher/" + name] = arr
    tensors["center"] = state.center
    tensors["perm"] = state.perm.astype(np.int64)
    opt_names = []
    if state.optimizer is not None:
        for name, v in state.optimizer.velocity.items():
            tensors["opt/" + name] = v
            opt_names.append(name)
    cfg_dict = dataclasses.asdict(state.config)
    cfg_dict["depths"] = list(cfg_dict["depths"])
    cfg_dict["heads"] = list(cfg_dict["heads"])
    meta = {
        "format": 1,
        "config": cfg_dict,
        "phase": state.phase,
        "epoch": state.epoch,
        "global_step": state.global_step,
        "phase_step": state.phase_step,
        "phase_total": state.phase_total,
        "cursor": state.cursor,
        "opt_params": opt_names,
        "rng": {name: g.bit_generator.state for name, g in state.rngs.items()},
    }
    save_tensors(path, tensors, meta)


def load_train_state(path: str) -> TrainState:
    tensors, meta = load_tensors(path)
    if meta is None or meta.get("format") != 1:
        raise ValueError("checkpoint carries no training metadata")
    cfg_dict = dict(meta["config"])
    cfg_dict["depths"] = tuple(cfg_dict["depths"])
    cfg_dict["heads"] = tuple(cfg_dict["heads"])
    config = RunConfig(**cfg_dict)
    state = build_state(config)
    state.student.load_state_arrays(
        {k[len("student/"):]: v for k, v in tensors.items() if k.startswith("student/")})
    state.teacher.load_state_arrays(
        {k[len("teacher/"):]: v for k, v in tensors.items() if k.startswith("teacher/")})
    state.center = tensors["center"].copy()
    state.perm = tensors["perm"].astype(np.int64).copy()
    state.phase = meta["phase"]
    state.epoch = meta["epoch"]
    state.global_step = meta["global_step"]
    state.phase_step = meta["phase_step"]
    state.phase_total = meta["phase_total"]
    state.cursor = meta["cursor"]
    for name, g in state.rngs.items():
        # JSON round-trips the generator state dict (big ints included)
        g.bit_generator.state = meta["rng"][name]
    if meta["opt_params"]:
        params = _phase_params(state)
        state.optimizer = SGD(params, momentum=config.momentum,
                              weight_decay=config.weight_decay,
                              lr_scales=_lr_scales(state, params))
        for name in meta["opt_params"]:
            state.optimizer.velocity[name][...] = tensors["opt/" + name]
    return state
