"""Quantization-aware training on a desk-scale two-layer tanh MLP.

Full-precision master weights are kept throughout; each forward pass
runs with effective weights that are either the masters themselves, a
direct quantize->dequantize projection, or an anchored projection
(quantize to a high-precision anchor, down-convert to the runtime
target).  Gradients flow through the quantizers as straight-through
estimators: the backward pass treats each projection as the identity and
applies the resulting gradients to the master weights.

The training task is teacher-student regression: inputs are standard
normal, targets come from a frozen random teacher of the same
architecture plus Gaussian noise.  Everything is seeded and full-batch,
so a (seed, config, variant) triple determines the trained model
bit-for-bit.  Only the weight matrices are quantized; biases stay full
precision and are exempt from weight decay.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .convert import ConversionPlan, downconvert
from .formats import ElementFormat, FormatError, MxFormatSpec, TieMode
from .quantize import dequantize_tensor, quantize_tensor


@dataclass
class ToyModel:
    """Two-layer tanh MLP parameters (the full-precision master weights)."""

    w1: np.ndarray  # (d_in, d_hid)
    b1: np.ndarray  # (d_hid,)
    w2: np.ndarray  # (d_hid, d_out)
    b2: np.ndarray  # (d_out,)

    def copy(self) -> "ToyModel":
        return ToyModel(self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy())

    def check_finite(self) -> None:
        for name, param in self.params():
            if not np.all(np.isfinite(param)):
                raise RuntimeError(f"non-finite parameter {name}")

    def params(self):
        return [("w1", self.w1), ("b1", self.b1), ("w2", self.w2), ("b2", self.b2)]


def init_model(d_in: int, d_hid: int, d_out: int, rng: np.random.Generator) -> ToyModel:
    """Scaled-normal init keeping pre-activations near unit variance."""
    return ToyModel(
        w1=rng.normal(0.0, d_in**-0.5, size=(d_in, d_hid)),
        b1=np.zeros(d_hid),
        w2=rng.normal(0.0, d_hid**-0.5, size=(d_hid, d_out)),
        b2=np.zeros(d_out),
    )


@dataclass(frozen=True)
class DirectQuant:
    """Effective weights = dequantize(quantize(W, spec))."""

    spec: MxFormatSpec


@dataclass(frozen=True)
class AnchoredQuant:
    """Effective weights = dequantize(downconvert(quantize(W, anchor), target))."""

    anchor: MxFormatSpec
    target: MxFormatSpec

    def __post_init__(self) -> None:
        if self.anchor.block_size != self.target.block_size:
            raise FormatError("anchored quantization requires equal block sizes")
        ConversionPlan.create(self.anchor.element, self.target.element, self.target.tie)


Attachment = DirectQuant | AnchoredQuant | None


def _project(weights: np.ndarray, attachment: Attachment) -> np.ndarray:
    if attachment is None:
        return weights
    if isinstance(attachment, DirectQuant):
        return dequantize_tensor(quantize_tensor(weights, attachment.spec))
    anchor = quantize_tensor(weights, attachment.anchor)
    target = downconvert(anchor, attachment.target.element, attachment.target.tie)
    return dequantize_tensor(target)


def effective_weights(model: ToyModel, attachment: Attachment):
    return _project(model.w1, attachment), _project(model.w2, attachment)


@dataclass
class ForwardCache:
    x: np.ndarray
    y: np.ndarray
    w1_eff: np.ndarray
    w2_eff: np.ndarray
    hidden: np.ndarray
    output: np.ndarray


@dataclass
class Grads:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


def forward_loss(model: ToyModel, attachment: Attachment, x: np.ndarray, y: np.ndarray):
    """Mean-squared-error forward pass; returns (loss, cache for backward)."""
    w1_eff, w2_eff = effective_weights(model, attachment)
    hidden = np.tanh(x @ w1_eff + model.b1)
    output = hidden @ w2_eff + model.b2
    loss = float(np.mean((output - y) ** 2))
    return loss, ForwardCache(x, y, w1_eff, w2_eff, hidden, output)


def backward_ste(cache: ForwardCache) -> Grads:
    """Gradients w.r.t. the master weights, quantizers treated as identity."""
    n = cache.output.size
    d_out = 2.0 * (cache.output - cache.y) / n
    gw2 = cache.hidden.T @ d_out
    gb2 = d_out.sum(axis=0)
    d_hidden = d_out @ cache.w2_eff.T
    d_pre = d_hidden * (1.0 - cache.hidden**2)
    gw1 = cache.x.T @ d_pre
    gb1 = d_pre.sum(axis=0)
    return Grads(gw1, gb1, gw2, gb2)


class AdamW:
    """Decoupled-weight-decay adaptive-moment optimizer.

    Decay applies to the weight matrices only, never the biases.
    """

    def __init__(
        self,
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self, model: ToyModel, grads: Grads) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, param in model.params():
            grad = getattr(grads, name)
            m = self._m.setdefault(name, np.zeros_like(param))
            v = self._v.setdefault(name, np.zeros_like(param))
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad**2
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if name.startswith("w"):
                param -= self.lr * self.weight_decay * param
            param -= self.lr * update


def default_int_schedule(
    block_size: int = 32, tie: TieMode = TieMode.HALF_AWAY
) -> tuple[MxFormatSpec, ...]:
    """Increasing-bit integer schedule: 2 -> 4 -> 6 -> 8."""
    return tuple(
        MxFormatSpec(ElementFormat.int_format(b), block_size, tie) for b in (2, 4, 6, 8)
    )


def default_fp_schedule(
    block_size: int = 32, tie: TieMode = TieMode.HALF_AWAY
) -> tuple[MxFormatSpec, ...]:
    """Increasing-bit float schedule: 4 (E2M1) -> 6 (E3M2) -> 8 (E4M3)."""
    pairs = ((2, 1), (3, 2), (4, 3))
    return tuple(
        MxFormatSpec(ElementFormat.float_format(e, m), block_size, tie) for e, m in pairs
    )


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    d_in: int = 16
    d_hid: int = 32
    d_out: int = 1
    n_samples: int = 128
    noise_sigma: float = 0.02
    teacher_seed: int = 7
    n_eval_samples: int = 256
    eval_seed: int = 10_000
    steps_per_epoch: int = 10
    epochs_per_format: int = 15
    schedule: tuple[MxFormatSpec, ...] = field(default_factory=default_int_schedule)
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01

    @property
    def steps_per_format(self) -> int:
        return self.steps_per_epoch * self.epochs_per_format

    @property
    def total_steps(self) -> int:
        return self.steps_per_format * len(self.schedule)


LR_SWEEP = (1e-2, 1e-3, 1e-4)


def teacher_model(cfg: TrainConfig) -> ToyModel:
    return init_model(cfg.d_in, cfg.d_hid, cfg.d_out, np.random.default_rng(cfg.teacher_seed))


def make_dataset(cfg: TrainConfig, split: str = "train"):
    """Seeded teacher-student regression data; identical for identical cfg."""
    if split == "train":
        seed, count = cfg.seed, cfg.n_samples
    elif split == "eval":
        seed, count = cfg.eval_seed, cfg.n_eval_samples
    else:
        raise ValueError(f"unknown split {split!r}")
    rng = np.random.default_rng([seed, 0])
    x = rng.normal(size=(count, cfg.d_in))
    y = teacher_forward(teacher_model(cfg), x)
    noise_rng = np.random.default_rng([seed, 1])
    y = y + cfg.noise_sigma * noise_rng.normal(size=y.shape)
    return x, y


def teacher_forward(model: ToyModel, x: np.ndarray) -> np.ndarray:
    return np.tanh(x @ model.w1 + model.b1) @ model.w2 + model.b2


@dataclass(frozen=True)
class FullPrecision:
    def label(self) -> str:
        return "full_precision"


@dataclass(frozen=True)
class SingleFormat:
    spec: MxFormatSpec

    def label(self) -> str:
        return f"single:{self.spec.element}"


@dataclass(frozen=True)
class MultiFormat:
    schedule: tuple[MxFormatSpec, ...]

    def label(self) -> str:
        return "multi_format"


@dataclass(frozen=True)
class MultiFormatAnchored:
    anchor: MxFormatSpec
    schedule: tuple[MxFormatSpec, ...]

    def label(self) -> str:
        return "multi_format_anchored"


Variant = FullPrecision | SingleFormat | MultiFormat | MultiFormatAnchored


@dataclass
class TrainResult:
    variant: Variant
    model: ToyModel
    losses: np.ndarray  # pre-update loss at every step
    switch_steps: tuple[int, ...]  # step indices where the attachment changed


def _check_schedule_increasing(schedule: tuple[MxFormatSpec, ...]) -> None:
    bits = [spec.element.bits for spec in schedule]
    if not schedule:
        raise ValueError("schedule must be nonempty")
    if any(b2 <= b1 for b1, b2 in zip(bits, bits[1:])):
        raise ValueError(
            f"multi-format schedule must use strictly increasing bitwidths, got {bits}"
        )


def _phases(variant: Variant, cfg: TrainConfig) -> list[tuple[Attachment, int]]:
    per_format = cfg.steps_per_format
    if isinstance(variant, FullPrecision):
        return [(None, cfg.total_steps)]
    if isinstance(variant, SingleFormat):
        # equal total budget to the multi-format runs
        return [(DirectQuant(variant.spec), cfg.total_steps)]
    if isinstance(variant, MultiFormat):
        _check_schedule_increasing(variant.schedule)
        return [(DirectQuant(spec), per_format) for spec in variant.schedule]
    _check_schedule_increasing(variant.schedule)
    return [
        (AnchoredQuant(variant.anchor, spec), per_format) for spec in variant.schedule
    ]


def train_run(variant: Variant, cfg: TrainConfig) -> TrainResult:
    """Train one variant; the log records the pre-update loss at every step."""
    x, y = make_dataset(cfg, "train")
    model = init_model(cfg.d_in, cfg.d_hid, cfg.d_out, np.random.default_rng([cfg.seed, 2]))
    optimizer = AdamW(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)

    losses: list[float] = []
    switch_steps: list[int] = []
    step = 0
    for phase_index, (attachment, n_steps) in enumerate(_phases(variant, cfg)):
        if phase_index:
            switch_steps.append(step)
        for _ in range(n_steps):
            loss, cache = forward_loss(model, attachment, x, y)
            if not np.isfinite(loss):
                raise RuntimeError(
                    f"non-finite loss in {variant.label()} at step {step}"
                )
            losses.append(loss)
            optimizer.step(model, backward_ste(cache))
            step += 1
    model.check_finite()
    return TrainResult(variant, model, np.asarray(losses), tuple(switch_steps))


@dataclass(frozen=True)
class EvalPoint:
    format_name: str
    bits: int
    loss: float


def ptq_sweep(
    model: ToyModel, eval_formats: list[MxFormatSpec], cfg: TrainConfig
) -> list[EvalPoint]:
    """Post-training-quantize the model at each format; held-out mean loss."""
    x, y = make_dataset(cfg, "eval")
    curve = []
    for spec in eval_formats:
        loss, _ = forward_loss(model, DirectQuant(spec), x, y)
        curve.append(EvalPoint(str(spec.element), spec.element.bits, loss))
    return curve


def default_eval_formats(
    kind: str, block_size: int = 32, tie: TieMode = TieMode.HALF_AWAY
) -> list[MxFormatSpec]:
    """PTQ evaluation grids: int 2..8, float 4..8 (incl. unseen 5 and 7)."""
    if kind == "int":
        elements = [ElementFormat.int_format(b) for b in range(2, 9)]
    elif kind == "fp":
        pairs = ((2, 1), (2, 2), (3, 2), (3, 3), (4, 3))
        elements = [ElementFormat.float_format(e, m) for e, m in pairs]
    else:
        raise ValueError(f"unknown element kind {kind!r}")
    return [MxFormatSpec(el, block_size, tie) for el in elements]


def sweep_learning_rates(
    variant: Variant, cfg: TrainConfig, rates: tuple[float, ...] = LR_SWEEP
) -> TrainResult:
    """Train at each step size and keep the best run by held-out loss."""
    x, y = make_dataset(cfg, "eval")
    best: TrainResult | None = None
    best_loss = np.inf
    for lr in rates:
        result = train_run(variant, replace(cfg, lr=lr))
        loss, _ = forward_loss(result.model, None, x, y)
        if loss < best_loss:
            best, best_loss = result, loss
    assert best is not None
    return best
