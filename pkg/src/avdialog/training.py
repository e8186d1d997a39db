"""Losses, the Adam fit loop with validation-driven LR halving, and a
central-difference gradient-check harness."""

from __future__ import annotations

import copy
import random
from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch

from .data import Corpus, DialogSample, build_decoder_context
from .decoder import DecoderState
from .model import AVSDModel
from .vocab import Vocabulary

_PROB_FLOOR = 1e-12


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainingConfig:
    epochs: int = 50
    batch_size: int = 8
    learning_rate: float = 1e-3
    lambda_c: float = 1.0          # decoder-state loss scale in the joint objective
    lr_halving: bool = True
    seed: int = 0
    history_policy: str = "previous_question_only"
    grad_clip: float = 0.0         # max norm; 0 disables

    def validate(self) -> None:
        if self.lambda_c < 0:
            raise ValueError("lambda_c must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


@dataclass
class LossReport:
    total: torch.Tensor
    ce_teacher: float = 0.0
    st: float = 0.0
    mse: float = 0.0
    token_count: int = 0

    def check_decomposition(self, lambda_c: float, tol: float = 1e-8) -> None:
        expected = self.st + lambda_c * self.mse + self.ce_teacher
        if abs(float(self.total.detach()) - expected) > tol * max(1.0, abs(expected)):
            raise TrainingError("loss total does not match its components")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def cross_entropy_loss(dists: torch.Tensor, targets: torch.Tensor,
                       pad_id: int | None = None) -> torch.Tensor:
    """Hard-target CE: -sum_i log P(target_i); padding positions excluded."""
    if dists.shape[0] != targets.shape[0]:
        raise ValueError("one distribution required per target token")
    picked = dists.gather(1, targets.unsqueeze(1)).squeeze(1)
    logs = torch.log(picked.clamp_min(_PROB_FLOOR))
    if pad_id is not None:
        logs = logs[targets != pad_id]
    return -logs.sum()


def student_teacher_loss(teacher_dists: torch.Tensor, student_dists: torch.Tensor,
                         pad_mask: torch.Tensor | None = None) -> torch.Tensor:
    """Soft-target CE; no gradient flows into the teacher through this term."""
    if teacher_dists.shape != student_dists.shape:
        raise ValueError("teacher and student distributions must align")
    soft = teacher_dists.detach()
    per_pos = -(soft * torch.log(student_dists.clamp_min(_PROB_FLOOR))).sum(dim=1)
    if pad_mask is not None:
        per_pos = per_pos[pad_mask]
    return per_pos.sum()


def state_similarity_loss(student_states: torch.Tensor, teacher_states: torch.Tensor) -> torch.Tensor:
    """Per-position MSE between hidden vectors, summed over positions."""
    if student_states.shape != teacher_states.shape:
        raise ValueError("state shapes differ")
    return ((student_states - teacher_states) ** 2).mean(dim=1).sum()


def jstl_loss(teacher_dists: torch.Tensor, student_dists: torch.Tensor,
              teacher_mid: torch.Tensor, student_mid: torch.Tensor,
              targets: torch.Tensor, lambda_c: float,
              soft_targets: torch.Tensor | None = None) -> LossReport:
    """Joint objective: soft-target CE (student), state MSE (both), hard CE (teacher).

    ``soft_targets`` lets a gradient check pin the stop-gradient side of the
    soft-target term to fixed values; training leaves it None, which uses the
    teacher's (detached) distributions.
    """
    st = student_teacher_loss(soft_targets if soft_targets is not None else teacher_dists,
                              student_dists)
    mse = state_similarity_loss(student_mid, teacher_mid)
    ce_t = cross_entropy_loss(teacher_dists, targets)
    total = st + lambda_c * mse + ce_t
    report = LossReport(total, ce_teacher=float(ce_t.detach()), st=float(st.detach()),
                        mse=float(mse.detach()), token_count=targets.shape[0])
    report.check_decomposition(lambda_c)
    return report


# ---------------------------------------------------------------------------
# turn items and forwards
# ---------------------------------------------------------------------------

@dataclass
class TurnItem:
    sample: DialogSample
    turn_index: int
    context_ids: list[int]
    target_ids: list[int]           # answer tokens plus <eos>
    caption_ids: list[int] | None


def make_items(corpus: Corpus, vocab: Vocabulary, history_policy: str) -> list[TurnItem]:
    items = []
    for sample in corpus.samples:
        caption = vocab.encode(sample.caption) if sample.caption else None
        for t in range(len(sample.turns)):
            ctx = vocab.encode(build_decoder_context(sample, t, history_policy))
            tgt = vocab.encode(sample.turns[t].answer) + [vocab.eos_id]
            items.append(TurnItem(sample, t, ctx, tgt, caption))
    return items


def forward_item(model: AVSDModel, corpus: Corpus, item: TurnItem):
    """Teacher-forced forward; returns (answer-position dists, state, positions)."""
    features = corpus.features[item.sample.video_id]
    streams = model.encode(features, item.caption_ids if model.is_teacher else None)
    tokens = item.context_ids + item.target_ids[:-1]   # feed answer without <eos>
    state = model.forward(torch.tensor(tokens, dtype=torch.long), streams)
    first = len(item.context_ids) - 1                  # row of <sos> predicts answer[0]
    positions = list(range(first, first + len(item.target_ids)))
    return state.dists[positions], state, positions


def item_loss(model: AVSDModel, corpus: Corpus, item: TurnItem) -> torch.Tensor:
    dists, _, _ = forward_item(model, corpus, item)
    return cross_entropy_loss(dists, torch.tensor(item.target_ids, dtype=torch.long))


def item_jstl_loss(teacher: AVSDModel, student: AVSDModel, corpus: Corpus,
                   item: TurnItem, lambda_c: float,
                   soft_targets: torch.Tensor | None = None) -> LossReport:
    t_dists, t_state, positions = forward_item(teacher, corpus, item)
    s_dists, s_state, _ = forward_item(student, corpus, item)
    mid = teacher.dec_cfg.M // 2
    targets = torch.tensor(item.target_ids, dtype=torch.long)
    return jstl_loss(t_dists, s_dists,
                     t_state.layer_states[mid][positions],
                     s_state.layer_states[mid][positions],
                     targets, lambda_c, soft_targets)


# ---------------------------------------------------------------------------
# fit loop
# ---------------------------------------------------------------------------

def apply_lr_schedule(best_val: float, val_loss: float, lr: float,
                      halving: bool) -> tuple[float, float, bool]:
    """Halve the learning rate when validation loss fails to beat the best.

    Returns (new best, new lr, improved).
    """
    if val_loss < best_val:
        return val_loss, lr, True
    return best_val, lr / 2 if halving else lr, False


@dataclass
class FitResult:
    log: list[dict] = field(default_factory=list)
    best_val: float = float("inf")
    best_state: dict | None = None       # state_dicts keyed by model role


def fit(models: dict[str, AVSDModel], train: Corpus, val: Corpus, vocab: Vocabulary,
        config: TrainingConfig, mode: str = "ce") -> FitResult:
    """Train with Adam; halve the LR whenever validation loss fails to improve.

    ``models`` maps roles to networks: {"model": m} for plain CE training, or
    {"teacher": t, "student": s} for the joint objective.  The best-validation
    parameters are restored into the models before returning.
    """
    config.validate()
    if mode not in ("ce", "jstl"):
        raise ValueError(f"unknown training mode {mode!r}")
    torch.manual_seed(config.seed)
    params = [p for m in models.values() for p in m.parameters()]
    opt = torch.optim.Adam(params, lr=config.learning_rate)
    train_items = make_items(train, vocab, config.history_policy)
    val_items = make_items(val, vocab, config.history_policy)
    rng = random.Random(config.seed)
    result = FitResult()
    lr = config.learning_rate

    def batch_loss(items: Sequence[TurnItem]) -> tuple[torch.Tensor, dict]:
        total = None
        comps = {"ce_teacher": 0.0, "st": 0.0, "mse": 0.0}
        n_tok = 0
        for item in items:
            if mode == "ce":
                loss = item_loss(models["model"], train, item)
            else:
                rep = item_jstl_loss(models["teacher"], models["student"], train,
                                     item, config.lambda_c)
                loss = rep.total
                for k in comps:
                    comps[k] += getattr(rep, k)
            total = loss if total is None else total + loss
            n_tok += len(item.target_ids)
        comps["token_count"] = n_tok
        return total / n_tok, comps

    def eval_loss(items: Sequence[TurnItem], corpus: Corpus) -> float:
        with torch.no_grad():
            total, n_tok = 0.0, 0
            for item in items:
                if mode == "ce":
                    total += float(item_loss(models["model"], corpus, item))
                else:
                    total += float(item_jstl_loss(models["teacher"], models["student"],
                                                  corpus, item, config.lambda_c).total)
                n_tok += len(item.target_ids)
            return total / n_tok

    for epoch in range(1, config.epochs + 1):
        order = list(range(len(train_items)))
        rng.shuffle(order)
        epoch_loss, n_batches = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            batch = [train_items[i] for i in order[start : start + config.batch_size]]
            opt.zero_grad()
            loss, _ = batch_loss(batch)
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss in epoch {epoch}, batch starting at {start}"
                )
            loss.backward()
            if config.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(params, config.grad_clip)
            opt.step()
            epoch_loss += float(loss.detach())
            n_batches += 1
        val_loss = eval_loss(val_items, val)
        result.log.append({
            "epoch": epoch,
            "train_loss": epoch_loss / max(1, n_batches),
            "val_loss": val_loss,
            "lr": lr,
        })
        result.best_val, lr, improved = apply_lr_schedule(
            result.best_val, val_loss, lr, config.lr_halving)
        if improved:
            result.best_state = {k: copy.deepcopy(m.state_dict()) for k, m in models.items()}
        else:
            for group in opt.param_groups:
                group["lr"] = lr
    if result.best_state is not None:
        for k, m in models.items():
            m.load_state_dict(result.best_state[k])
    return result


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    per_parameter: dict[str, float]

    @property
    def max_error(self) -> float:
        return max(self.per_parameter.values(), default=0.0)

    def passed(self, tolerance: float) -> bool:
        return self.max_error < tolerance


def gradient_check(module: torch.nn.Module, loss_fn: Callable[[], torch.Tensor],
                   step: float = 1e-5, coords_per_param: int = 10,
                   seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients to central differences.

    For each parameter tensor, up to ``coords_per_param`` coordinates are
    sampled (seeded, so reruns check the same coordinates) and perturbed by
    +/- ``step``.  Relative error is |a - n| / max(|a|, |n|, 1e-8).
    """
    module.zero_grad()
    loss_fn().backward()
    analytic = {n: p.grad.detach().clone() for n, p in module.named_parameters()
                if p.grad is not None}
    rng = random.Random(seed)
    report: dict[str, float] = {}
    with torch.no_grad():
        for name, param in module.named_parameters():
            if name not in analytic:
                continue
            flat = param.view(-1)
            n_coords = min(coords_per_param, flat.numel())
            coords = rng.sample(range(flat.numel()), n_coords)
            worst = 0.0
            for c in coords:
                orig = float(flat[c])
                flat[c] = orig + step
                f_plus = float(loss_fn())
                flat[c] = orig - step
                f_minus = float(loss_fn())
                flat[c] = orig
                numeric = (f_plus - f_minus) / (2 * step)
                a = float(analytic[name].view(-1)[c])
                err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                worst = max(worst, err)
            report[name] = worst
    module.zero_grad()
    return GradCheckReport(report)
