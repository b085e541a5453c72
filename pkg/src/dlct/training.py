"""XE pre-training, beam-based self-critical fine-tuning, beam search and evaluation."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint as ckpt
from .data import BOS, EOS, PAD, Dataset, FeatureBundle, TrainExample
from .metrics import CorpusStats, build_corpus_stats, cider_d, corpus_bleu, corpus_cider_d
from .model import DLCT, ModelConfig
from .numerics import Tensor, backward, index, log_softmax, mul, no_grad, scale, sum_

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    warmup_epochs: int = 4
    peak_lr: float = 1e-4
    # (first epoch, end epoch exclusive or None, rate); epochs are 0-based
    lr_stages: tuple = ((4, 10, 1e-4), (10, 12, 2e-6), (12, None, 4e-7))
    xe_epochs: int = 18
    scst_epochs: int = 5
    scst_lr: float = 5e-6
    beam: int = 5
    batch_xe: int = 50
    batch_scst: int = 100
    betas: tuple = (0.9, 0.98)
    eps: float = 1e-9
    scst_clip: float = 1.0
    seed: int = 0
    eval_beam: int = 5
    eval_every: int = 1

    @classmethod
    def reference(cls, **kw) -> "TrainConfig":
        return cls(**kw)

    @classmethod
    def desk(cls, **kw) -> "TrainConfig":
        # the reference schedule's shape with every rate x10: a desk epoch is ~36 steps, not thousands
        base = dict(warmup_epochs=1, peak_lr=1e-3, lr_stages=((1, 8, 1e-3), (8, 9, 2e-5), (9, None, 4e-6)),
                    xe_epochs=10, scst_epochs=5, scst_lr=5e-5, batch_xe=50, batch_scst=100)
        base.update(kw)
        return cls(**base)

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["lr_stages"] = tuple(tuple(s) for s in d.get("lr_stages", cls.lr_stages))
        d["betas"] = tuple(d.get("betas", cls.betas))
        return cls(**d)


def lr_schedule(epoch: int, step: int, cfg: TrainConfig, steps_per_epoch: int = 1) -> float:
    """Linear warmup to ``peak_lr`` over the warmup epochs, then staged constants."""
    if epoch < cfg.warmup_epochs:
        total = cfg.warmup_epochs * max(steps_per_epoch, 1)
        return cfg.peak_lr * (epoch * max(steps_per_epoch, 1) + step) / total
    for start, end, rate in cfg.lr_stages:
        if epoch >= start and (end is None or epoch < end):
            return rate
    return cfg.lr_stages[-1][2] if cfg.lr_stages else cfg.peak_lr


# -- optimiser -------------------------------------------------------------

class Adam:
    def __init__(self, params: dict[str, Tensor], betas=(0.9, 0.98), eps: float = 1e-9):
        self.params = params
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            p.data -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"m/{k}": v for k, v in self.m.items()}
        out.update({f"v/{k}": v for k, v in self.v.items()})
        out["t"] = np.array(self.t)
        return out

    def load_arrays(self, arrays) -> None:
        self.t = int(arrays["t"])
        for k in self.params:
            self.m[k] = np.array(arrays[f"m/{k}"])
            self.v[k] = np.array(arrays[f"v/{k}"])


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    total = math.sqrt(sum(float((p.grad * p.grad).sum()) for p in params if p.grad is not None))
    if total > max_norm > 0:
        factor = max_norm / total
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * factor
    return total


# -- losses ----------------------------------------------------------------

def teacher_forcing(captions: Sequence[Sequence[int]], max_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Decoder inputs [BOS, y...] and targets [y..., EOS], PAD-filled to a common length."""
    seqs = [list(c)[: max_len - 1] for c in captions]
    T = max(len(s) for s in seqs) + 1
    inputs = np.full((len(seqs), T), PAD, dtype=np.int64)
    targets = np.full((len(seqs), T), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        inputs[i, : len(s) + 1] = [BOS] + s
        targets[i, : len(s) + 1] = s + [EOS]
    return inputs, targets


def _gather_target_logp(logits: Tensor, targets: np.ndarray) -> Tensor:
    vocab = logits.shape[-1]
    if targets.size and targets.max() >= vocab:
        raise ValueError(f"target id {int(targets.max())} out of range for vocab {vocab}")
    lp = log_softmax(logits, axis=-1)
    B, T = targets.shape
    return index(lp, (np.arange(B)[:, None], np.arange(T)[None, :], targets))


def xe_loss(logits: Tensor, targets, pad: int = PAD) -> Tensor:
    """Summed over time, averaged over the batch; ``pad`` positions are ignored."""
    targets = np.asarray(targets, dtype=np.int64)
    if targets.ndim == 1:
        targets = targets[None]
    if logits.ndim == 2:
        logits = logits.reshape((1,) + logits.shape)
    picked = _gather_target_logp(logits, targets)
    mask = (targets != pad).astype(np.float64)
    return scale(sum_(mul(picked, mask)), -1.0 / targets.shape[0])


def sequence_log_probs(model: DLCT, memory: Tensor, memory_mask: np.ndarray,
                       sequences: Sequence[Sequence[int]]) -> Tensor:
    """log p(y) for each generated sequence (tokens after BOS, EOS included when present)."""
    inputs, targets = teacher_forcing([_strip_eos(s) for s in sequences], model.cfg.max_len + 1)
    finished = [len(s) > 0 and s[-1] == EOS for s in sequences]
    mask = (targets != PAD).astype(np.float64)
    for i, done in enumerate(finished):
        if not done:  # truncated at max_len: no EOS term
            mask[i, len(sequences[i])] = 0.0
    inputs, targets, mask = inputs[:, : model.cfg.max_len], targets[:, : model.cfg.max_len], mask[:, : model.cfg.max_len]
    logits = model.decode(memory, memory_mask, inputs)
    picked = _gather_target_logp(logits, np.where(mask > 0, targets, 0))
    return sum_(mul(picked, mask), axis=1)


def _strip_eos(seq: Sequence[int]) -> list[int]:
    seq = list(seq)
    return seq[:-1] if seq and seq[-1] == EOS else seq


# -- beam search -----------------------------------------------------------

@dataclass
class DecodedBeam:
    sequences: list[list[int]]   # generated tokens, EOS-terminated unless cut at max_len
    log_probs: list[float]

    def captions(self) -> list[list[int]]:
        return [_strip_eos(s) for s in self.sequences]


def _repeat_rows(x: Tensor, k: int) -> Tensor:
    return index(x, np.repeat(np.arange(x.shape[0]), k))


def beam_search_batch(model: DLCT, bundles: Sequence[FeatureBundle], k: int, max_len: int | None = None,
                      memory: tuple[Tensor, np.ndarray] | None = None) -> list[DecodedBeam]:
    """Beam search over several images at once.

    Scores are cumulative log-probabilities (no length normalisation). Finished
    hypotheses keep their slot and score. Ties rank by token id, then parent
    beam index. When fewer than ``k`` finite hypotheses exist, the remaining
    slots repeat the best one.
    """
    if k < 1:
        raise ValueError("beam size must be >= 1")
    max_len = min(max_len or model.cfg.max_len, model.cfg.max_len)
    with no_grad():
        mem, mem_mask = memory if memory is not None else model.encode_batch(model.batch(list(bundles)))
        B = mem.shape[0]
        mem_k = Tensor(np.repeat(mem.data, k, axis=0))
        mask_k = np.repeat(mem_mask, k, axis=0)
        seqs = np.full((B, k, 1), BOS, dtype=np.int64)
        scores = np.full((B, k), -np.inf)
        scores[:, 0] = 0.0
        done = np.zeros((B, k), dtype=bool)
        V = model.cfg.vocab_size
        for t in range(max_len):
            if np.all(done | ~np.isfinite(scores)):
                break
            logits = model.decode(mem_k, mask_k, seqs.reshape(B * k, -1))
            lp = log_softmax(Tensor(logits.data[:, -1]), axis=-1).data.reshape(B, k, V)
            lp[:, :, PAD] = -np.inf
            lp[:, :, BOS] = -np.inf
            cand = scores[:, :, None] + lp
            # finished beams continue only through the PAD slot, unchanged
            cand[done] = -np.inf
            cand[:, :, PAD] = np.where(done, scores, -np.inf)
            flat = cand.reshape(B, k * V)
            parent_idx = np.repeat(np.arange(k), V)
            token_idx = np.tile(np.arange(V), k)
            new_seqs = np.empty((B, k, t + 2), dtype=np.int64)
            new_scores = np.empty((B, k))
            new_done = np.empty((B, k), dtype=bool)
            for b in range(B):
                order = np.lexsort((parent_idx, token_idx, -flat[b]))[:k]
                par, tok = parent_idx[order], token_idx[order]
                new_seqs[b] = np.concatenate([seqs[b, par], tok[:, None]], axis=1)
                new_scores[b] = flat[b, order]
                new_done[b] = done[b, par] | (tok == EOS)
            seqs, scores, done = new_seqs, new_scores, new_done
    out = []
    for b in range(B):
        hyps = []
        for j in range(k):
            if not np.isfinite(scores[b, j]):
                continue
            toks = [int(x) for x in seqs[b, j, 1:] if x != PAD]
            if EOS in toks:
                toks = toks[: toks.index(EOS) + 1]
            hyps.append((toks, float(scores[b, j])))
        # stable sort keeps the tie-break order from selection
        hyps.sort(key=lambda h: -h[1])
        while len(hyps) < k:
            hyps.append((list(hyps[0][0]), hyps[0][1]))
        out.append(DecodedBeam([h[0] for h in hyps], [h[1] for h in hyps]))
    return out


def beam_search(model: DLCT, bundle: FeatureBundle, k: int = 5, max_len: int | None = None) -> DecodedBeam:
    return beam_search_batch(model, [bundle], k, max_len)[0]


def greedy_decode(model: DLCT, bundle: FeatureBundle, max_len: int | None = None) -> list[int]:
    max_len = min(max_len or model.cfg.max_len, model.cfg.max_len)
    with no_grad():
        mem, mask = model.encode_batch(model.batch([bundle]))
        seq = [BOS]
        for _ in range(max_len):
            lp = log_softmax(model.decode(mem, mask, np.array([seq])), axis=-1).data[0, -1].copy()
            lp[[PAD, BOS]] = -np.inf
            tok = int(np.argmax(lp))
            seq.append(tok)
            if tok == EOS:
                break
    return seq[1:]


# -- self-critical step ----------------------------------------------------

def scst_advantages(rewards: np.ndarray) -> np.ndarray:
    """Reward minus the mean over the k beams of the same image; rewards [B, k]."""
    rewards = np.asarray(rewards, dtype=np.float64)
    # centre on the first beam before averaging so equal rewards give exact zeros
    shifted = rewards - rewards[..., :1]
    return shifted - shifted.mean(axis=-1, keepdims=True)


def scst_loss(model: DLCT, bundles: Sequence[FeatureBundle], beams: Sequence[DecodedBeam],
              rewards: np.ndarray) -> Tensor:
    """Surrogate whose gradient is -(1/k) sum_i (r_i - b) grad log p(y_i), averaged over images."""
    k = len(beams[0].sequences)
    adv = scst_advantages(rewards)
    memory, mem_mask = model.encode_batch(model.batch(list(bundles)))
    mem_k = _repeat_rows(memory, k)
    mask_k = np.repeat(mem_mask, k, axis=0)
    seqs = [s for beam in beams for s in beam.sequences]
    logp = sequence_log_probs(model, mem_k, mask_k, seqs)
    weights = adv.reshape(-1) / k
    return scale(sum_(mul(logp, weights)), -1.0 / len(bundles))


class CiderReward:
    """CIDEr-D against an example's references, df frozen over a reference corpus."""

    def __init__(self, references: Sequence[Sequence[Sequence[int]]]):
        self.stats: CorpusStats = build_corpus_stats(references)

    def __call__(self, candidate: Sequence[int], refs: Sequence[Sequence[int]]) -> float:
        return cider_d(_strip_eos(candidate), refs, self.stats)


def scst_step(model: DLCT, examples: Sequence[TrainExample], reward: CiderReward, k: int,
              optimizer: Adam | None = None, lr: float = 0.0, clip: float | None = None) -> float:
    """Decode k beams per image, reward them, apply one policy-gradient update. Returns the mean reward."""
    if k < 2:
        raise TrainingError(f"self-critical training needs k >= 2 beams (got {k})")
    bundles = [ex.bundle for ex in examples]
    was_training = model.training
    model.eval()
    beams = beam_search_batch(model, bundles, k)
    model.train(was_training)
    rewards = np.array([[reward(s, ex.captions) for s in beam.sequences] for ex, beam in zip(examples, beams)])
    if optimizer is not None:
        optimizer.zero_grad()
        loss = scst_loss(model, bundles, beams, rewards)
        backward(loss)
        if clip:
            clip_grad_norm(model.parameters(), clip)
        optimizer.step(lr)
    return float(rewards.mean())


# -- evaluation ------------------------------------------------------------

def xe_eval_loss(model: DLCT, examples: Sequence[TrainExample], batch: int = 100) -> float:
    """Mean per-caption XE loss over every reference of every example."""
    total, count = 0.0, 0
    with no_grad():
        for i in range(0, len(examples), batch):
            chunk = examples[i:i + batch]
            mem, mask = model.encode_batch(model.batch([ex.bundle for ex in chunk]))
            rows = np.concatenate([[j] * len(ex.captions) for j, ex in enumerate(chunk)]).astype(np.int64)
            caps = [c for ex in chunk for c in ex.captions]
            inputs, targets = teacher_forcing(caps, model.cfg.max_len)
            logits = model.decode(Tensor(mem.data[rows]), mask[rows], inputs)
            total += float(xe_loss(logits, targets).data) * len(caps)
            count += len(caps)
    return total / max(count, 1)


def evaluate(model: DLCT, examples: Sequence[TrainExample], k: int = 5, stats: CorpusStats | None = None,
             batch: int = 100) -> dict:
    """Corpus BLEU-1/4 and CIDEr-D of beam-search captions, plus mean top-beam log-prob."""
    model.eval()
    caps, logps = [], []
    for i in range(0, len(examples), batch):
        chunk = examples[i:i + batch]
        for beam in beam_search_batch(model, [ex.bundle for ex in chunk], k):
            caps.append(beam.captions()[0])
            logps.append(beam.log_probs[0])
    refs = [ex.captions for ex in examples]
    cider, per_item = corpus_cider_d(caps, refs, stats)
    bleus = corpus_bleu(caps, refs, 4)
    return {"cider_d": cider, "bleu1": bleus[0], "bleu4": bleus[3], "log_prob": float(np.mean(logps)),
            "captions": caps, "per_item_cider": per_item}


# -- training loop ---------------------------------------------------------

@dataclass
class TrainState:
    phase: str = "xe"
    epoch: int = 0
    step: int = 0
    rng_state: dict = field(default_factory=dict)
    model_rng_state: dict = field(default_factory=dict)


class Trainer:
    """Runs the XE phase then the SCST phase, checkpointing after every epoch.

    Metrics go to ``<out>/metrics.jsonl`` and wall-clock times to
    ``<out>/timing.jsonl``, so the metric log is reproducible byte for byte.
    """

    def __init__(self, dataset: Dataset, model_cfg: ModelConfig, train_cfg: TrainConfig,
                 out_dir: str | Path | None = None, phase: str = "both"):
        if phase not in ("xe", "scst", "both"):
            raise TrainingError(f"unknown phase {phase!r}")
        self.dataset = dataset
        self.mcfg = model_cfg
        self.tcfg = train_cfg
        self.out = Path(out_dir) if out_dir is not None else None
        self.phase = phase
        self.model = DLCT(model_cfg, seed=train_cfg.seed)
        self.opt = Adam(self.model.params, train_cfg.betas, train_cfg.eps)
        self.rng = np.random.default_rng(train_cfg.seed + 17)
        self.state = TrainState(phase="scst" if phase == "scst" else "xe")
        self.train_examples = dataset.splits["train"]
        self.val_examples = dataset.splits.get("val", [])
        self.reward = CiderReward([ex.captions for ex in self.train_examples])
        self.val_stats = build_corpus_stats([ex.captions for ex in self.val_examples]) if self.val_examples else None
        self.history: list[dict] = []
        self.last_lr = 0.0

    # -- persistence -------------------------------------------------------
    def save(self, name: str | None = None) -> Path | None:
        if self.out is None:
            return None
        self.state.rng_state = self.rng.bit_generator.state
        self.state.model_rng_state = self.model.rng.bit_generator.state
        # named after the epoch just finished; the saved state points at the next one
        name = name or f"{self.state.phase}-epoch{self.state.epoch - 1:03d}"
        path = self.out / "checkpoints" / name
        ckpt.save_checkpoint(path, self.model, self.opt, dataclasses.asdict(self.state), self.tcfg.to_dict(),
                             self.dataset.fingerprint())
        (self.out / "checkpoints" / "LATEST").write_text(name + "\n")
        return path

    @classmethod
    def resume(cls, dataset: Dataset, run_dir: str | Path, phase: str = "both") -> "Trainer":
        run_dir = Path(run_dir)
        name = (run_dir / "checkpoints" / "LATEST").read_text().strip()
        manifest, arrays = ckpt.load_checkpoint_state(run_dir / "checkpoints" / name)
        trainer = cls(dataset, ModelConfig(**manifest["model_config"]),
                      TrainConfig.from_dict(manifest["train_config"]), run_dir, phase)
        ckpt.restore(trainer.model, trainer.opt, arrays)
        trainer.state = TrainState(**manifest["state"])
        trainer.rng.bit_generator.state = trainer.state.rng_state
        trainer.model.rng.bit_generator.state = trainer.state.model_rng_state
        return trainer

    def _log(self, record: dict, wall_ms: int) -> None:
        self.history.append({**record, "wall_ms": wall_ms})
        if self.out is not None:
            self.out.mkdir(parents=True, exist_ok=True)
            with open(self.out / "metrics.jsonl", "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
            with open(self.out / "timing.jsonl", "a") as fh:
                fh.write(json.dumps({"phase": record["phase"], "epoch": record["epoch"], "wall_ms": wall_ms}) + "\n")

    # -- phases ------------------------------------------------------------
    def xe_epoch(self, max_steps: int | None = None) -> float:
        cfg = self.tcfg
        model = self.model.train()
        order = self.rng.permutation(len(self.train_examples))
        spe = math.ceil(len(order) / cfg.batch_xe)
        losses = []
        for step in range(spe if max_steps is None else min(spe, max_steps)):
            idx = order[step * cfg.batch_xe:(step + 1) * cfg.batch_xe]
            exs = [self.train_examples[i] for i in idx]
            caps = [ex.captions[int(self.rng.integers(len(ex.captions)))] for ex in exs]
            inputs, targets = teacher_forcing(caps, self.mcfg.max_len)
            self.opt.zero_grad()
            loss = xe_loss(model.forward([ex.bundle for ex in exs], inputs), targets)
            backward(loss)
            self.last_lr = lr_schedule(self.state.epoch, step, cfg, spe)
            self.opt.step(self.last_lr)
            losses.append(float(loss.data))
            self.state.step += 1
        return float(np.mean(losses))

    def scst_epoch(self, max_steps: int | None = None) -> float:
        cfg = self.tcfg
        self.model.train()
        order = self.rng.permutation(len(self.train_examples))
        spe = math.ceil(len(order) / cfg.batch_scst)
        rewards = []
        for step in range(spe if max_steps is None else min(spe, max_steps)):
            idx = order[step * cfg.batch_scst:(step + 1) * cfg.batch_scst]
            exs = [self.train_examples[i] for i in idx]
            rewards.append(scst_step(self.model, exs, self.reward, cfg.beam, self.opt, cfg.scst_lr, cfg.scst_clip))
            self.state.step += 1
        return float(np.mean(rewards))

    def validate(self) -> dict:
        if not self.val_examples:
            return {}
        loss = xe_eval_loss(self.model, self.val_examples)
        ev = evaluate(self.model, self.val_examples, self.tcfg.eval_beam, self.val_stats)
        return {"val_loss": loss, "cider_d": ev["cider_d"], "bleu4": ev["bleu4"], "bleu1": ev["bleu1"]}

    def run(self, max_steps: int | None = None) -> list[dict]:
        cfg = self.tcfg
        if self.phase in ("xe", "both") and self.state.phase == "xe":
            while self.state.epoch < cfg.xe_epochs:
                t0 = time.perf_counter()
                train_loss = self.xe_epoch(max_steps)
                metrics = self.validate() if (self.state.epoch + 1) % cfg.eval_every == 0 else {}
                self._log({"phase": "xe", "epoch": self.state.epoch, "loss": train_loss,
                           "lr": self.last_lr, **metrics},
                          int((time.perf_counter() - t0) * 1000))
                self.state.epoch += 1
                self.save()
        if self.phase in ("scst", "both") and self.state.phase == "xe":
            # fine-tuning starts from the XE weights with fresh optimiser moments
            self.state = TrainState(phase="scst", step=self.state.step)
            self.opt = Adam(self.model.params, cfg.betas, cfg.eps)
        if self.phase in ("scst", "both") and self.state.phase == "scst":
            while self.state.epoch < cfg.scst_epochs:
                t0 = time.perf_counter()
                reward = self.scst_epoch(max_steps)
                metrics = self.validate() if (self.state.epoch + 1) % cfg.eval_every == 0 else {}
                self._log({"phase": "scst", "epoch": self.state.epoch, "loss": -reward, "reward": reward,
                           "lr": cfg.scst_lr, **metrics}, int((time.perf_counter() - t0) * 1000))
                self.state.epoch += 1
                self.save()
        return self.history


def train(dataset: Dataset, model_cfg: ModelConfig, train_cfg: TrainConfig, out_dir=None,
          phase: str = "both", max_steps: int | None = None) -> Trainer:
    trainer = Trainer(dataset, model_cfg, train_cfg, out_dir, phase)
    trainer.run(max_steps)
    return trainer


def overfit_batch(model: DLCT, examples: Sequence[TrainExample], max_steps: int = 500, lr: float = 1e-3,
                  target: float = 0.05, betas=(0.9, 0.98), eps: float = 1e-9) -> list[float]:
    """Fit one fixed batch (first reference of each example) until the XE loss drops below ``target``."""
    inputs, targets = teacher_forcing([ex.captions[0] for ex in examples], model.cfg.max_len)
    bundles = [ex.bundle for ex in examples]
    opt = Adam(model.params, betas, eps)
    model.train()
    losses = []
    for _ in range(max_steps):
        opt.zero_grad()
        loss = xe_loss(model.forward(bundles, inputs), targets)
        backward(loss)
        opt.step(lr)
        losses.append(float(loss.data))
        if losses[-1] < target:
            break
    return losses
