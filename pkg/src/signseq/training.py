"""Optimization machinery: optimizers, teacher-forced steps, the multitask
and gradient-reversal loops, balanced sampling and checkpoint averaging.

The multitask and domain-adaptation loops are generic over loss callables so
they can drive any feature network built from autodiff ops; ``train_seq2seq``
is the concrete translation loop used by the command line.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import metrics
from .autodiff import Parameter, Tape, Tensor
from .seq2seq import EOS, ModelConfig, Seq2Seq, load_checkpoint, save_checkpoint


class TrainingError(Exception):
    pass


class DivergenceError(TrainingError):
    """Loss blew past the divergence guard; ``trace`` holds the losses so far."""

    def __init__(self, message: str, trace: Sequence[float] = ()):
        super().__init__(message)
        self.trace = list(trace)


DIVERGENCE_FACTOR = 1e3
CLIP_NORM = 5.0


# ---------------------------------------------------------------------------
# configuration


@dataclass
class TrainConfig:
    max_iterations: int = 30000
    checkpoint_interval: int = 1000
    average_window: int = 5
    lr: float = 1e-4
    optimizer: str = "adam"
    batch_size: int = 16
    teacher_forcing: float = 1.0
    teacher_forcing_end: Optional[float] = None  # linear schedule when set
    clip_norm: Optional[float] = CLIP_NORM
    seed: int = 0
    max_decode_len: int = 50

    def __post_init__(self):
        if self.max_iterations < 1 or self.checkpoint_interval < 1:
            raise TrainingError("iteration counts must be positive")
        if self.max_iterations % self.checkpoint_interval:
            raise TrainingError(
                f"checkpoint interval {self.checkpoint_interval} does not divide "
                f"max iterations {self.max_iterations}")
        if self.average_window < 1:
            raise TrainingError("average window must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise TrainingError(f"unknown optimizer {self.optimizer!r}")
        if self.batch_size < 1 or self.lr <= 0:
            raise TrainingError("batch size and learning rate must be positive")

    def teacher_forcing_at(self, iteration: int) -> float:
        if self.teacher_forcing_end is None:
            return self.teacher_forcing
        p = iteration / self.max_iterations
        return self.teacher_forcing + (self.teacher_forcing_end - self.teacher_forcing) * p


def step_function(steps: Sequence[tuple[int, float]]) -> Callable[[int], float]:
    """Piecewise-constant schedule: value of the last ``(start, value)`` with start <= t."""
    steps = sorted(steps)
    if not steps or steps[0][0] > 0:
        raise TrainingError("step function must define a value from iteration 0")

    def beta(t: int) -> float:
        value = steps[0][1]
        for start, v in steps:
            if start <= t:
                value = v
        return value

    return beta


@dataclass
class MultitaskConfig:
    beta: object = 0.1  # constant or callable t -> weight

    def beta_at(self, t: int) -> float:
        b = float(self.beta(t)) if callable(self.beta) else float(self.beta)
        if b < 0 or not math.isfinite(b):
            raise TrainingError(f"beta({t}) = {b} must be finite and >= 0")
        return b


@dataclass
class DomainAdaptConfig:
    gamma: float = 2.5
    classifier_layers: int = 2
    classifier_hidden: int = 2048
    classifier_lr: float = 5e-3

    def __post_init__(self):
        if self.gamma <= 0:
            raise TrainingError("gamma must be > 0")
        if self.classifier_layers < 1:
            raise TrainingError("domain classifier needs at least one layer")


# ---------------------------------------------------------------------------
# optimizers


class SGD:
    kind = "sgd"

    def __init__(self, params: Sequence[Parameter], lr: float):
        self.params = list(params)
        self.lr = lr

    def step(self) -> None:
        for p in self.params:
            p.data -= self.lr * p.grad

    def state_dict(self) -> dict:
        return {}

    def load_state_dict(self, state: dict) -> None:
        pass


class Adam:
    kind = "adam"

    def __init__(self, params: Sequence[Parameter], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict:
        state = {"t": np.array(self.t)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            state[f"m{i}"] = m.copy()
            state[f"v{i}"] = v.copy()
        return state

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["t"])
        for i in range(len(self.params)):
            self.m[i][...] = state[f"m{i}"]
            self.v[i][...] = state[f"v{i}"]


def make_optimizer(kind: str, params: Sequence[Parameter], lr: float):
    if kind == "adam":
        return Adam(params, lr)
    if kind == "sgd":
        return SGD(params, lr)
    raise TrainingError(f"unknown optimizer {kind!r}")


def optimizer_update(params: Sequence[Parameter], gradients: Sequence[np.ndarray], optimizer) -> None:
    """Load ``gradients`` into ``params`` and apply one optimizer step in place."""
    if len(params) != len(gradients):
        raise TrainingError("one gradient per parameter required")
    for p, g in zip(params, gradients):
        if p.data.shape != np.shape(g):
            raise TrainingError(f"gradient shape {np.shape(g)} does not match {p.name} {p.data.shape}")
        p.grad = np.array(g, dtype=np.float64)
    optimizer.step()


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()


def global_norm(params: Iterable[Parameter]) -> float:
    return math.sqrt(sum(float(np.vdot(p.grad, p.grad)) for p in params))


def clip_grad_norm(params: Sequence[Parameter], max_norm: Optional[float]) -> float:
    """Rescale gradients so their joint L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = global_norm(params)
    if max_norm is not None and norm > max_norm:
        k = max_norm / norm
        for p in params:
            p.grad *= k
    return norm


# ---------------------------------------------------------------------------
# single steps


def _backprop(params: Sequence[Parameter], loss_fn: Callable[[], Tensor]) -> float:
    zero_grad(params)
    with Tape() as tape:
        loss = loss_fn()
    value = loss.item()
    if not math.isfinite(value):
        raise ad.NonFiniteError(f"non-finite loss {value}")
    ad.backward(tape, loss)
    return value


def teacher_forced_step(model: Seq2Seq, tokens, targets: Sequence[Sequence[int]],
                        teacher_forcing: float = 1.0, rng=None,
                        train: bool = True) -> tuple[float, dict]:
    """Mean batch loss and ``{name: gradient}`` for one teacher-forced pass."""
    if not targets:
        raise TrainingError("empty batch")
    rng = rng if rng is not None else np.random.default_rng(0)
    params = model.parameters()
    loss = _backprop(params, lambda: model.batch_nll(tokens, targets, train=train, rng=rng,
                                                     teacher_forcing=teacher_forcing))
    return loss, {name: p.grad.copy() for name, p in model.params.items()}


class _Guard:
    """Divergence guard: abort once a loss exceeds 1e3 times the first one."""

    def __init__(self, factor: float = DIVERGENCE_FACTOR):
        self.factor = factor
        self.initial: Optional[float] = None
        self.trace: list = []

    def check(self, iteration: int, loss: float) -> None:
        self.trace.append(loss)
        if self.initial is None:
            self.initial = loss
        elif loss > self.factor * max(self.initial, 1e-12):
            raise DivergenceError(
                f"loss {loss:.4g} at iteration {iteration} exceeds {self.factor:g}x "
                f"initial loss {self.initial:.4g}", self.trace)


# ---------------------------------------------------------------------------
# small dense networks for feature extractors, task heads and domain heads


def mlp_init(prefix: str, sizes: Sequence[int], rng: np.random.Generator,
             std: Optional[float] = None) -> dict:
    params = {}
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        s = std if std is not None else 1.0 / math.sqrt(n_in)
        params[f"{prefix}.{i}.W"] = Parameter(rng.normal(0.0, s, size=(n_in, n_out)), f"{prefix}.{i}.W")
        params[f"{prefix}.{i}.b"] = Parameter(np.zeros(n_out), f"{prefix}.{i}.b")
    return params


def mlp_forward(params: dict, prefix: str, x: Tensor) -> Tensor:
    """Dense layers with tanh between them and a linear last layer."""
    i = 0
    while f"{prefix}.{i}.W" in params:
        if i:
            x = ad.tanh(x)
        x = ad.add(x @ params[f"{prefix}.{i}.W"], params[f"{prefix}.{i}.b"])
        i += 1
    if i == 0:
        raise TrainingError(f"no layers under {prefix!r}")
    return x


def classification_loss(logits: Tensor, labels) -> Tensor:
    labels = np.asarray(labels)
    return ad.cross_entropy(logits, labels, np.full(len(labels), 1.0 / len(labels)))


def accuracy(logits: Tensor, labels) -> float:
    return float(np.mean(logits.data.argmax(axis=1) == np.asarray(labels)))


# ---------------------------------------------------------------------------
# multitask training


@dataclass
class MultitaskTrace:
    total: list = field(default_factory=list)
    task_a: list = field(default_factory=list)
    task_b: list = field(default_factory=list)
    beta: list = field(default_factory=list)


def combined_loss(l1: Tensor, l2: Tensor, beta: float) -> Tensor:
    """L_total = L1 + beta * L2."""
    return ad.add(l1, ad.scale(l2, beta))


def multitask_train(params: Sequence[Parameter], loss_a: Callable[[object], Tensor],
                    loss_b: Optional[Callable[[object], Tensor]], batches_a: Iterable,
                    batches_b: Optional[Iterable], config: MultitaskConfig, optimizer,
                    iterations: int, clip_norm: Optional[float] = None) -> MultitaskTrace:
    """One update per iteration on ``L1(batch_a) + beta(t) * L2(batch_b)``.

    ``params`` are all trainable tensors (shared trunk plus both heads).
    Passing ``loss_b=None`` gives plain single-task training on task a.
    """
    it_a = iter(batches_a)
    it_b = iter(batches_b) if loss_b is not None else None
    trace = MultitaskTrace()
    guard = _Guard()
    for t in range(iterations):
        try:
            batch_a = next(it_a)
            batch_b = next(it_b) if it_b is not None else None
        except StopIteration:
            raise TrainingError(f"task stream exhausted at iteration {t}") from None
        beta = config.beta_at(t) if loss_b is not None else 0.0
        parts = {}

        def total():
            l1 = loss_a(batch_a)
            parts["a"] = l1.item()
            if loss_b is None:
                return l1
            l2 = loss_b(batch_b)
            parts["b"] = l2.item()
            return combined_loss(l1, l2, beta)

        value = _backprop(params, total)
        guard.check(t, value)
        clip_grad_norm(params, clip_norm)
        optimizer.step()
        trace.total.append(value)
        trace.task_a.append(parts["a"])
        trace.task_b.append(parts.get("b", float("nan")))
        trace.beta.append(beta)
    return trace


# ---------------------------------------------------------------------------
# gradient reversal domain adaptation


def lambda_schedule(p: float, gamma: float = 2.5) -> float:
    """Reversal strength ``2 / (1 + exp(-gamma p)) - 1``, rising from 0 toward 1."""
    if not 0.0 <= p <= 1.0:
        raise TrainingError(f"progress {p} outside [0, 1]")
    if gamma <= 0:
        raise TrainingError("gamma must be > 0")
    return 2.0 / (1.0 + math.exp(-gamma * p)) - 1.0


@dataclass
class DomainTrace:
    label_loss: list = field(default_factory=list)
    domain_loss: list = field(default_factory=list)
    domain_accuracy: list = field(default_factory=list)
    lam: list = field(default_factory=list)


def domain_classifier(input_dim: int, config: DomainAdaptConfig, rng: np.random.Generator,
                      prefix: str = "domain") -> dict:
    hidden = [config.classifier_hidden] * (config.classifier_layers - 1)
    return mlp_init(prefix, [input_dim, *hidden, 2], rng)


def domain_adapt_train(feature_fn: Callable[[object], Tensor], feature_params: Sequence[Parameter],
                       label_loss: Callable[[Tensor, object], Tensor], label_params: Sequence[Parameter],
                       domain_params: dict, source_batches: Iterable, target_batches: Optional[Iterable],
                       config: DomainAdaptConfig, iterations: int, lr: float = 1e-3,
                       main_optimizer: str = "adam", fixed_lambda: Optional[float] = None,
                       clip_norm: Optional[float] = None, prefix: str = "domain") -> DomainTrace:
    """Label loss on source batches plus a domain loss behind a gradient reversal layer.

    ``source_batches`` yield ``(inputs, labels)``; ``target_batches`` yield
    unlabeled inputs.  Features of both go through ``grl`` into a domain
    classifier (source = 0, target = 1) trained with SGD; the feature network
    and label head use ``main_optimizer``.  ``lambda`` follows
    ``lambda_schedule(t / iterations, gamma)`` unless ``fixed_lambda`` is set.
    With no target stream this is plain supervised training.
    """
    main = make_optimizer(main_optimizer, [*feature_params, *label_params], lr)
    head = SGD(list(domain_params.values()), config.classifier_lr)
    all_params = [*feature_params, *label_params, *domain_params.values()]
    it_s = iter(source_batches)
    it_t = iter(target_batches) if target_batches is not None else None
    trace = DomainTrace()
    guard = _Guard()
    for t in range(iterations):
        inputs, labels = next(it_s)
        target = next(it_t) if it_t is not None else None
        lam = fixed_lambda if fixed_lambda is not None else lambda_schedule(t / iterations, config.gamma)
        parts = {}

        def total():
            feats = feature_fn(inputs)
            l1 = label_loss(feats, labels)
            parts["label"] = l1.item()
            if target is None:
                return l1
            feats_t = feature_fn(target)
            both = ad.concat([feats, feats_t], axis=0)
            domains = np.r_[np.zeros(feats.shape[0], int), np.ones(feats_t.shape[0], int)]
            logits = mlp_forward(domain_params, prefix, ad.grl(both, lam))
            l2 = classification_loss(logits, domains)
            parts["domain"] = l2.item()
            parts["acc"] = accuracy(logits, domains)
            return ad.add(l1, l2)

        value = _backprop(all_params, total)
        guard.check(t, value)
        clip_grad_norm([*feature_params, *label_params], clip_norm)
        main.step()
        if target is not None:
            head.step()
        trace.label_loss.append(parts["label"])
        trace.domain_loss.append(parts.get("domain", float("nan")))
        trace.domain_accuracy.append(parts.get("acc", float("nan")))
        trace.lam.append(lam)
    return trace


# ---------------------------------------------------------------------------
# balanced sampling


def balanced_sampler(labels: Sequence, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Endless stream of index batches with classes drawn uniformly.

    Classes come from a queue refilled with shuffled permutations of all
    classes; within a class an instance is drawn with replacement.
    """
    if batch_size < 1:
        raise TrainingError("batch size must be positive")
    labels = np.asarray(labels)
    classes = sorted(set(labels.tolist()))
    if not classes:
        raise TrainingError("no classes to sample")
    members = {c: np.flatnonzero(labels == c) for c in classes}
    queue: list = []
    while True:
        batch = np.empty(batch_size, dtype=np.int64)
        for i in range(batch_size):
            if not queue:
                queue = [classes[j] for j in rng.permutation(len(classes))]
            pool = members[queue.pop()]
            batch[i] = pool[rng.integers(len(pool))]
        yield batch


def class_balanced_sampler(dataset: dict, batch_size: int, rng: np.random.Generator) -> Iterator[list]:
    """``balanced_sampler`` over ``{class: [instances]}``; yields lists of ``(class, instance)``."""
    for c, items in dataset.items():
        if len(items) == 0:
            raise TrainingError(f"class {c!r} is empty")
    keys = list(dataset)
    labels = np.concatenate([np.full(len(dataset[k]), i) for i, k in enumerate(keys)])
    flat = [(k, x) for k in keys for x in dataset[k]]
    for batch in balanced_sampler(labels, batch_size, rng):
        yield [flat[i] for i in batch]


# ---------------------------------------------------------------------------
# checkpoint averaging


def checkpoint_average(snapshots: Sequence[dict]) -> dict:
    """Element-wise mean per named parameter over ``snapshots`` (name -> array)."""
    if not snapshots:
        raise TrainingError("need at least one snapshot to average")
    names = list(snapshots[0])
    for i, snap in enumerate(snapshots[1:], 1):
        if set(snap) != set(names):
            raise TrainingError(f"snapshot {i} parameter names differ from snapshot 0")
    out = {}
    for name in names:
        arrays = [np.asarray(s[name].data if isinstance(s[name], Tensor) else s[name], dtype=np.float64)
                  for s in snapshots]
        shape = arrays[0].shape
        if any(a.shape != shape for a in arrays):
            raise TrainingError(f"shape mismatch for {name!r} across snapshots")
        # incremental mean: K identical snapshots come back bit-exact
        mean = arrays[0].copy()
        for k, a in enumerate(arrays[1:], 2):
            mean += (a - mean) / k
        out[name] = mean
    return out


# ---------------------------------------------------------------------------
# seq2seq training loop


@dataclass
class Sample:
    sample_id: str
    tokens: object  # TokenSequence
    target: list  # word ids ending in EOS
    sentence: str = ""


@dataclass
class TraceRow:
    iteration: int
    train_loss: float
    eval_loss: float
    eval_bleu4: float

    def line(self) -> str:
        return f"{self.iteration} {self.train_loss:.6f} {self.eval_loss:.6f} {self.eval_bleu4:.4f}"

    @classmethod
    def parse(cls, line: str) -> "TraceRow":
        it, a, b, c = line.split()
        return cls(int(it), float(a), float(b), float(c))


TRACE_HEADER = "# iteration train_loss eval_loss eval_bleu4"


@dataclass
class TrainResult:
    model: Seq2Seq
    trace: list
    checkpoints: list
    final_path: Optional[Path]
    seconds: float


def evaluate_model(model: Seq2Seq, samples: Sequence[Sample], vocab, batch_size: int = 32,
                   max_len: int = 50) -> tuple[float, float, list]:
    """(mean loss, corpus BLEU-4, hypotheses) over ``samples``."""
    if not samples:
        return float("nan"), float("nan"), []
    losses, hyps = [], []
    for lo in range(0, len(samples), batch_size):
        chunk = samples[lo:lo + batch_size]
        toks = [s.tokens for s in chunk]
        losses.append(model.batch_nll(toks, [s.target for s in chunk]).item() * len(chunk))
        hyps += [vocab.decode(ids) for ids in model.greedy_decode(toks, max_len=max_len)]
    refs = [s.sentence if s.sentence else vocab.decode(s.target) for s in samples]
    b4 = metrics.bleu([metrics.tokenize(h) for h in hyps], [metrics.tokenize(r) for r in refs])[3]
    return sum(losses) / len(samples), b4, hyps


def _iteration_rng(seed: int, iteration: int) -> np.random.Generator:
    return np.random.default_rng([seed, iteration])


def _ckpt_name(iteration: int) -> str:
    return f"ckpt-{iteration}.ssck"


def _optim_name(iteration: int) -> str:
    return f"ckpt-{iteration}.optim.npz"


def train_seq2seq(model: Seq2Seq, train: Sequence[Sample], dev: Sequence[Sample], config: TrainConfig,
                  vocab, run_dir=None, resume: bool = False, log: Optional[Callable[[str], None]] = None,
                  eval_limit: Optional[int] = None) -> TrainResult:
    """Teacher-forced training with periodic checkpoints and a last-K averaged final model.

    Every iteration draws its batch and dropout masks from a generator keyed
    by ``(seed, iteration)``, so a run resumed from a checkpoint follows the
    same trajectory as an uninterrupted one.  With ``run_dir`` set, writes
    ``ckpt-{iteration}.ssck``, ``trace.log`` and ``final.ssck``.
    """
    if not train:
        raise TrainingError("no training samples")
    for s in train:
        if not s.target or s.target[-1] != EOS:
            raise TrainingError(f"sample {s.sample_id}: target must end with EOS")
    started = time.perf_counter()
    run_dir = Path(run_dir) if run_dir is not None else None
    params = model.parameters()
    opt = make_optimizer(config.optimizer, params, config.lr)
    dev_eval = list(dev)[:eval_limit] if eval_limit else list(dev)
    trace: list = []
    checkpoints: list = []
    snapshots: list = []
    start = 0
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        if resume:
            start, trace, checkpoints, snapshots = _resume(model, opt, run_dir, config)
    guard = _Guard()
    window_losses: list = []
    n = len(train)
    for it in range(start, config.max_iterations):
        rng = _iteration_rng(config.seed, it)
        idx = rng.choice(n, size=min(config.batch_size, n), replace=False)
        batch = [train[i] for i in idx]
        tf = config.teacher_forcing_at(it)
        try:
            loss = _backprop(params, lambda: model.batch_nll(
                [s.tokens for s in batch], [s.target for s in batch], train=True, rng=rng,
                teacher_forcing=tf))
        except ad.NonFiniteError as exc:
            raise TrainingError(f"iteration {it}: {exc}") from exc
        guard.check(it, loss)
        clip_grad_norm(params, config.clip_norm)
        opt.step()
        window_losses.append(loss)
        done = it + 1
        if done % config.checkpoint_interval == 0:
            eval_loss, eval_b4, _ = (evaluate_model(model, dev_eval, vocab, max_len=config.max_decode_len)
                                     if dev_eval else (float("nan"), float("nan"), []))
            row = TraceRow(done, float(np.mean(window_losses)), eval_loss, eval_b4)
            window_losses = []
            trace.append(row)
            snapshots.append({k: p.data.copy() for k, p in model.params.items()})
            snapshots = snapshots[-config.average_window:]
            if log:
                log(row.line())
            if run_dir is not None:
                path = run_dir / _ckpt_name(done)
                save_checkpoint(path, model.config, model.params, extra={"iteration": done})
                np.savez(run_dir / _optim_name(done), iteration=np.array(done), **opt.state_dict())
                with open(run_dir / "trace.log", "a") as f:
                    if f.tell() == 0:
                        f.write(TRACE_HEADER + "\n")
                    f.write(row.line() + "\n")
                checkpoints.append(path)
    averaged = checkpoint_average(snapshots) if snapshots else {k: p.data.copy() for k, p in model.params.items()}
    final = Seq2Seq(model.config, {k: Parameter(v, k) for k, v in averaged.items()})
    final_path = None
    if run_dir is not None:
        final_path = run_dir / "final.ssck"
        save_checkpoint(final_path, final.config, final.params,
                        extra={"iteration": config.max_iterations,
                               "averaged": [p.name for p in checkpoints[-config.average_window:]]})
    return TrainResult(final, trace, checkpoints, final_path, time.perf_counter() - started)


def _resume(model: Seq2Seq, opt, run_dir: Path, config: TrainConfig):
    found = sorted(run_dir.glob("ckpt-*.ssck"), key=lambda p: int(p.stem.split("-")[1]))
    if not found:
        return 0, [], [], []
    latest = found[-1]
    cfg, arrays, extra = load_checkpoint(latest)
    if cfg != model.config:
        raise TrainingError(f"{latest}: model config differs from the run config")
    for name, p in model.params.items():
        p.data[...] = arrays[name]
    start = int(extra["iteration"])
    state_path = run_dir / _optim_name(start)
    if not state_path.exists():
        raise TrainingError(f"{state_path} missing; cannot resume with optimizer state")
    with np.load(state_path) as state:
        opt.load_state_dict({k: state[k] for k in state.files if k != "iteration"})
    trace = []
    trace_path = run_dir / "trace.log"
    if trace_path.exists():
        trace = [r for r in read_trace(trace_path) if r.iteration <= start]
        trace_path.write_text(TRACE_HEADER + "\n" + "".join(r.line() + "\n" for r in trace))
    kept = found[-config.average_window:]
    snapshots = [load_checkpoint(p)[1] for p in kept]
    return start, trace, list(found), snapshots


def read_trace(path) -> list:
    return [TraceRow.parse(l) for l in Path(path).read_text().splitlines() if l and not l.startswith("#")]
