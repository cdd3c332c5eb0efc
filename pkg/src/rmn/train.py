"""Training loop, Adam, learning-rate schedule, evaluation and checkpoints."""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from rmn import tensor as T
from rmn.data import EOS, Dataset
from rmn.inference import beam_decode, greedy_decode
from rmn.metrics import evaluate_captions
from rmn.model import NO_LABEL, RMN, ModelConfig, step_targets, unroll_teacher_forced
from rmn.tensor import ParameterStore

log = logging.getLogger(__name__)


class MissingGradient(RuntimeError):
    pass


ABLATIONS = {
    "S": ("soft", False),
    "H": ("hard", False),
    "S+L": ("soft", True),
    "H+L": ("hard", True),
}


@dataclass
class TrainConfig:
    d_h: int = 512
    d_e: int | None = None
    d_att: int | None = None
    lam: float = 1.0
    tau: float = 1.0
    tau_min: float | None = None     # anneal exponentially towards this per epoch when set
    tau_decay: float = 1.0
    lr: float = 1e-4
    lr_decay: float = 10.0
    lr_interval: int = 10
    batch_size: int = 64
    epochs: int = 30
    seed: int = 0
    mode: str = "hard"
    linguistic: bool = True
    clip_norm: float | None = 5.0
    dtype: str = "float32"
    val_beam: int = 1
    workers: int = 1

    def __post_init__(self):
        if self.mode not in ("hard", "soft"):
            raise ValueError(f"mode must be hard or soft, got {self.mode!r}")
        for name in ("d_h", "lr", "batch_size", "epochs", "lr_interval", "tau"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")

    @property
    def effective_lambda(self) -> float:
        return self.lam if self.linguistic else 0.0

    @property
    def setting(self) -> str:
        return ("H" if self.mode == "hard" else "S") + ("+L" if self.linguistic else "")

    def model_config(self, vocab_size: int, d_a: int, d_o: int, d_m: int) -> ModelConfig:
        return ModelConfig(vocab_size, d_a, d_o, d_m, d_h=self.d_h, d_e=self.d_e, d_att=self.d_att,
                           tau=self.tau, selection=self.mode, dtype=self.dtype)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


PRESETS = {
    "msvd": TrainConfig(d_h=512, lr=1e-4, lr_decay=10.0, lr_interval=10),
    "msrvtt": TrainConfig(d_h=1300, lr=1e-4, lr_decay=3.0, lr_interval=5),
    # desk-scale synthetic corpus: small width, small batches, faster learning rate
    "synthetic": TrainConfig(d_h=32, lr=5e-3, lr_decay=10.0, lr_interval=25, batch_size=5, epochs=30),
}


def preset(name: str, **overrides) -> TrainConfig:
    base = PRESETS[name].to_dict()
    base.update(overrides)
    return TrainConfig(**base)


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Step decay: lr0 / factor ** floor(epoch / interval)."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.lr / cfg.lr_decay ** (epoch // cfg.lr_interval)


def tau_schedule(epoch: int, cfg: TrainConfig) -> float:
    if cfg.tau_min is None:
        return cfg.tau
    return max(cfg.tau_min, cfg.tau * cfg.tau_decay ** epoch)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(store: ParameterStore, state: AdamState, lr: float, allow_missing: bool = False) -> None:
    """Bias-corrected Adam update of every parameter; gradients are cleared afterwards."""
    missing = [n for n, p in store.items() if p.grad is None]
    if missing and not allow_missing:
        raise MissingGradient(f"no gradient for {missing[:3]}{'...' if len(missing) > 3 else ''}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for name, p in store.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data = (p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.data.dtype)
        p.grad = None


def clip_grad_norm(store: ParameterStore, max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2))
                          for p in store.values() if p.grad is not None))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in store.values():
            if p.grad is not None:
                p.grad = p.grad * np.asarray(scale, dtype=p.grad.dtype)
    return total


# ---------------------------------------------------------------------------
# per-sample work
# ---------------------------------------------------------------------------

def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, index])


def _sample_pass(model: RMN, features, sample, lam: float, rng, scale: float, check_discrete: bool):
    """Forward + backward for one caption; returns per-sample statistics."""
    lb = unroll_teacher_forced(model, features, sample, lam, rng, mode="train")
    _, targets, labels = step_targets(sample)
    hist = np.zeros(3, dtype=np.int64)
    correct = labelled = violations = 0
    for step, lab in zip(lb.steps, labels):
        k = step.decision.index
        hist[k] += 1
        if lab != NO_LABEL:
            labelled += 1
            correct += int(k == lab)
        if check_discrete:
            hits = sum(np.array_equal(step.v_t.data, c.data) for c in step.candidates)
            if hits < 1 or not np.array_equal(step.v_t.data, step.candidates[k].data):
                violations += 1
    stats = {
        "cap": float(lb.caption_loss.data),
        "pos": float(lb.linguistic_loss.data),
        "total": float(lb.total.data),
        "hist": hist,
        "sel_correct": correct,
        "sel_labelled": labelled,
        "violations": violations,
        "tokens": len(targets),
    }
    (lb.total * scale).backward()
    return stats


_WORKER_MODEL = None


def _worker_init(model_cfg: dict, seed: int):
    global _WORKER_MODEL
    _WORKER_MODEL = RMN(ModelConfig(**model_cfg), seed)


def _worker_job(args):
    state, items, lam, scale, check = args
    model = _WORKER_MODEL
    model.store.load_state_dict(state)
    out = []
    for features, sample, rng_key in items:
        model.store.zero_grad()
        stats = _sample_pass(model, features, sample, lam, np.random.default_rng(rng_key), scale, check)
        grads = {n: p.grad for n, p in model.store.items()}
        out.append((stats, grads))
    return out


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def decode_dataset(model: RMN, dataset: Dataset, beam: int = 1) -> dict:
    """Caption every video; returns ``video_id -> list of words``."""
    out = {}
    for vid in dataset.video_ids():
        feats = dataset.features[vid]
        if beam <= 1:
            tokens, _ = greedy_decode(model, feats)
        else:
            tokens = beam_decode(model, feats, beam=beam)[0].words
        out[vid] = dataset.vocab.decode(tokens)
    return out


def teacher_forced_eval(model: RMN, dataset: Dataset, lam: float) -> dict:
    """Eval-mode (noise-free) losses, token accuracy and module-selection accuracy."""
    cap = pos = 0.0
    tok_ok = tok_n = sel_ok = sel_n = 0
    hist = np.zeros(3, dtype=np.int64)
    word_hist = np.zeros(3, dtype=np.int64)   # word steps only, comparable to gold labels
    with T.no_grad():
        for s in dataset.samples:
            lb = unroll_teacher_forced(model, dataset.features[s.video_id], s, lam, mode="eval")
            cap += float(lb.caption_loss.data)
            pos += float(lb.linguistic_loss.data)
            _, targets, labels = step_targets(s)
            for step, tgt, lab in zip(lb.steps, targets, labels):
                tok_ok += int(np.argmax(step.log_probs.data) == tgt)
                tok_n += 1
                k = step.decision.index
                hist[k] += 1
                if lab != NO_LABEL:
                    sel_ok += int(k == lab)
                    sel_n += 1
                    word_hist[k] += 1
    n = max(len(dataset.samples), 1)
    return {
        "loss_cap": cap / n,
        "loss_pos": pos / n,
        "loss": (cap + lam * pos) / n,
        "token_accuracy": tok_ok / max(tok_n, 1),
        "selection_accuracy": sel_ok / max(sel_n, 1),
        "selection_histogram": hist.tolist(),
        "word_selection_histogram": word_hist.tolist(),
    }


def evaluate(model: RMN, dataset: Dataset, lam: float = 1.0, beam: int = 1) -> dict:
    captions = decode_dataset(model, dataset, beam)
    refs = dataset.references()
    vids = list(captions)
    metrics = evaluate_captions([captions[v] for v in vids], [refs[v] for v in vids])
    metrics.update(teacher_forced_eval(model, dataset, lam))
    metrics["exact_match"] = float(np.mean([captions[v] in refs[v] for v in vids]))
    return metrics


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(model: RMN, cfg: TrainConfig, path, extra: dict | None = None) -> None:
    path = Path(path)
    model.store.save(path)
    echo = {
        "train_config": cfg.to_dict(),
        "model_config": model.cfg.to_dict(),
        "architecture_hash": model.cfg.architecture_hash(),
        "model_seed": model.store.seed,
    }
    if extra:
        echo.update(extra)
    path.with_suffix(".json").write_text(json.dumps(echo, indent=2, sort_keys=True))


class CheckpointMismatch(ValueError):
    pass


def load_checkpoint(path, vocab_size: int | None = None) -> tuple:
    """Rebuild the model from the config echo and load its weights."""
    path = Path(path)
    echo = json.loads(path.with_suffix(".json").read_text())
    mcfg = ModelConfig(**echo["model_config"])
    if mcfg.architecture_hash() != echo["architecture_hash"]:
        raise CheckpointMismatch("config echo hash does not match its model config")
    if vocab_size is not None and vocab_size != mcfg.vocab_size:
        raise CheckpointMismatch(
            f"checkpoint vocabulary has {mcfg.vocab_size} entries, data has {vocab_size}"
        )
    model = RMN(mcfg, echo.get("model_seed", 0))
    try:
        model.store.load(path)
    except T.CheckpointError as exc:
        raise CheckpointMismatch(str(exc)) from None
    return model, TrainConfig.from_dict(echo["train_config"])


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: RMN
    history: list
    best_cider: float
    best_epoch: int
    discreteness_violations: int


def build_model(cfg: TrainConfig, dataset: Dataset) -> RMN:
    any_feats = next(iter(dataset.features.values()))
    mcfg = cfg.model_config(len(dataset.vocab), any_feats.va.shape[1], any_feats.vo.shape[2],
                            any_feats.vm.shape[1])
    return RMN(mcfg, cfg.seed)


def train(cfg: TrainConfig, dataset: Dataset, val: Dataset | None = None, out_dir=None,
          on_epoch=None, check_discrete: bool = True) -> TrainResult:
    """Mini-batch training; logs one record per epoch and keeps the best-CIDEr checkpoint.

    Each sample's Gumbel noise comes from its own generator keyed by
    (seed, epoch, position), so results do not depend on the worker count.
    """
    val = val or dataset
    model = build_model(cfg, dataset)
    adam = AdamState()
    lam = cfg.effective_lambda
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
        log_fh = open(out / "train_log.jsonl", "w")
    pool = None
    if cfg.workers > 1:
        pool = ProcessPoolExecutor(cfg.workers, initializer=_worker_init,
                                   initargs=(model.cfg.to_dict(), cfg.seed))
    history, best, best_epoch, violations_total = [], -1.0, -1, 0
    samples = dataset.samples
    try:
        for epoch in range(cfg.epochs):
            lr = lr_schedule(epoch, cfg)
            model.cfg.tau = tau_schedule(epoch, cfg)
            order = np.random.default_rng([cfg.seed, epoch]).permutation(len(samples))
            agg = {"cap": 0.0, "pos": 0.0, "total": 0.0, "sel_correct": 0, "sel_labelled": 0,
                   "violations": 0, "tokens": 0}
            hist = np.zeros(3, dtype=np.int64)
            grad_norms = []
            for start in range(0, len(order), cfg.batch_size):
                batch = order[start:start + cfg.batch_size]
                scale = 1.0 / len(batch)
                items = [(dataset.features[samples[i].video_id], samples[i], [cfg.seed, epoch, int(i)])
                         for i in batch]
                model.store.zero_grad()
                if pool is None:
                    results = [_sample_pass(model, f, s, lam, np.random.default_rng(k), scale, check_discrete)
                               for f, s, k in items]
                else:
                    results = _parallel_batch(pool, model, items, lam, scale, check_discrete, cfg.workers)
                for st in results:
                    hist += st["hist"]
                    for key in agg:
                        agg[key] += st[key]
                grad_norms.append(clip_grad_norm(model.store, cfg.clip_norm or 0.0))
                adam_step(model.store, adam, lr)
            n = len(samples)
            vm = evaluate(model, val, lam, beam=cfg.val_beam)
            record = {
                "epoch": epoch + 1,
                "setting": cfg.setting,
                "lr": lr,
                "tau": model.cfg.tau,
                "loss_cap": agg["cap"] / n,
                "loss_pos": agg["pos"] / n,
                "loss": agg["total"] / n,
                "selection_histogram": dict(zip(("Locate", "Relate", "Func"), hist.tolist())),
                "tokens": agg["tokens"],
                "train_selection_accuracy": agg["sel_correct"] / max(agg["sel_labelled"], 1),
                "discreteness_violations": agg["violations"] if cfg.mode == "hard" else None,
                "grad_norm": float(np.mean(grad_norms)),
                "val": vm,
            }
            if cfg.mode == "hard":
                violations_total += agg["violations"]
            history.append(record)
            log.info("epoch %d lr %.2e L_cap %.4f L_pos %.4f hist %s val CIDEr %.3f",
                     epoch + 1, lr, record["loss_cap"], record["loss_pos"], hist.tolist(), vm["cider"])
            if out:
                log_fh.write(json.dumps(record, sort_keys=True) + "\n")
                log_fh.flush()
            if vm["cider"] > best:
                best, best_epoch = vm["cider"], epoch + 1
                if out:
                    save_checkpoint(model, cfg, out / "best.rmnc", {"epoch": epoch + 1, "val": vm})
            if on_epoch:
                on_epoch(record)
        if out:
            save_checkpoint(model, cfg, out / "last.rmnc", {"epoch": cfg.epochs})
    finally:
        if pool is not None:
            pool.shutdown()
        if out:
            log_fh.close()
    return TrainResult(model, history, best, best_epoch, violations_total)


def _parallel_batch(pool, model, items, lam, scale, check, workers):
    state = model.store.state_dict()
    shards = [items[i::workers] for i in range(workers)]
    futures = [pool.submit(_worker_job, (state, shard, lam, scale, check)) for shard in shards if shard]
    per_shard = [f.result() for f in futures]
    # restore original sample order so the reduction is order-identical to one worker
    ordered = [None] * len(items)
    for w, res in enumerate(per_shard):
        for j, r in enumerate(res):
            ordered[w + j * workers] = r
    results = []
    for stats, grads in ordered:
        for name, p in model.store.items():
            g = grads[name]
            if g is None:
                continue
            p.grad = g.copy() if p.grad is None else p.grad + g
        results.append(stats)
    return results
