"""Training objectives: reconstruction, adversarial, semantic (supervised /
mean-teacher), the four hybridization terms with frozen-criterion gradient
control, the contradict loss, and its alternatives.

Distance convention: squared norms are mean squared error over batch and
feature dims (better conditioned gradients); a config flag switches to the
unsquared per-sample L2 norm averaged over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import torch
import torch.nn.functional as F
from torch.func import functional_call

from .data import UNLABELED


def _dist(a, b, squared=True):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    if squared:
        return F.mse_loss(a, b)
    diff = (a - b).flatten(1)
    return diff.norm(dim=1).mean()


def reconstruction_loss(x, x_hat, squared=True):
    """Pixel distance between input and reconstruction; zero iff equal."""
    return _dist(x, x_hat, squared)


def gan_losses(real_logits, fake_logits):
    """Non-saturating logistic GAN losses.

    d_loss = softplus(-real) + softplus(fake); g_loss = softplus(-fake).
    """
    d_loss = F.softplus(-real_logits).mean() + F.softplus(fake_logits).mean()
    g_loss = F.softplus(-fake_logits).mean()
    return d_loss, g_loss


def adversarial_g_loss(fake_logits):
    """Generator-side term: make fakes look real to the discriminator."""
    return F.softplus(-fake_logits).mean()


@dataclass
class SemLossReport:
    total: torch.Tensor
    supervised: torch.Tensor
    consistency: torch.Tensor
    n_labeled: int


def semantic_loss(logits, labels, mode="supervised_ce", teacher_probs=None,
                  consistency_weight=1.0):
    """Classifier guidance loss.

    supervised_ce: cross-entropy over labeled rows only (sentinel -1 rows
    are ignored; all-unlabeled batches return 0 with n_labeled=0).
    meanteacher: adds MSE between student and teacher softmax on all rows.
    """
    if mode not in ("supervised_ce", "meanteacher"):
        raise ValueError(f"unknown semantic loss mode {mode!r}")
    mask = labels != UNLABELED
    n_labeled = int(mask.sum())
    zero = logits.sum() * 0.0
    sup = (F.cross_entropy(logits[mask], labels[mask]) if n_labeled else zero)
    cons = zero
    if mode == "meanteacher":
        if teacher_probs is None:
            raise ValueError("meanteacher mode requires teacher_probs")
        cons = F.mse_loss(F.softmax(logits, dim=1), teacher_probs.detach())
    total = sup + consistency_weight * cons
    return SemLossReport(total=total, supervised=sup, consistency=cons,
                         n_labeled=n_labeled)


def detached_call(module, x):
    """Forward through ``module`` with parameters detached from autograd:
    gradients flow to the input but not to the module's parameters.
    """
    state = {k: v.detach() for k, v in module.state_dict().items()}
    return functional_call(module, state, (x,))


class HybridCriterion:
    """Re-encoding criterion for hybridization losses.

    frozen=True snapshots the parameters of (E_c, C, E_r) at construction,
    so the loss value and gradient are independent of subsequent parameter
    values: only the hybridization process itself is optimized. frozen=False
    evaluates through the live modules, letting gradients reach them.
    """

    def __init__(self, e_c, head, e_r, frozen=True):
        self.frozen = frozen
        self._modules = {"e_c": e_c, "head": head, "e_r": e_r}
        self._state = {}
        if frozen:
            for name, m in self._modules.items():
                self._state[name] = {
                    k: v.detach().clone() for k, v in m.state_dict().items()}

    def _apply(self, name, x):
        m = self._modules[name]
        if self.frozen:
            return functional_call(m, self._state[name], (x,))
        return m(x)

    def classify(self, x):
        return self._apply("head", self._apply("e_c", x))

    def encode_context(self, x):
        return self._apply("e_r", x)


@dataclass
class HybridTerms:
    class_pos: torch.Tensor
    cont_pos: torch.Tensor
    class_neg: torch.Tensor
    cont_neg: torch.Tensor
    x_h: torch.Tensor


def hybrid_criterion_terms(x_h, x1, x2, criterion, margin_class=10.0,
                           margin_cont=1.0, squared=True):
    """The four hybridization terms for a precomputed hybrid batch.

    Positive terms pull the hybrid's re-encoded class logits toward the
    semantic parent's and its context code toward the non-semantic parent's.
    Negative terms push away from the opposite parents, in hinge form
    (the raw negated norms are unbounded below).
    """
    logits_h = criterion.classify(x_h)
    ctx_h = criterion.encode_context(x_h)
    class_pos = _dist(criterion.classify(x1), logits_h, squared)
    cont_pos = _dist(criterion.encode_context(x2), ctx_h, squared)
    class_neg = F.relu(margin_class - _dist(criterion.classify(x2), logits_h, squared))
    cont_neg = F.relu(margin_cont - _dist(criterion.encode_context(x1), ctx_h, squared))
    return class_pos, cont_pos, class_neg, cont_neg


def hybrid_losses(x1, x2, nets, margin_class=10.0, margin_cont=1.0,
                  frozen=True, criterion=None, squared=True):
    """Build hybrids ``G(E_c(x1), E_r(x2))`` and score them.

    With frozen=True the criterion parameters receive zero gradient;
    gradients still reach the generator and the parent-encoding paths.
    """
    if x1.shape[0] != x2.shape[0]:
        raise ValueError("parent batches must have the same size")
    x_h = nets.generate(nets.e_c(x1), nets.e_r(x2))
    if criterion is None:
        criterion = HybridCriterion(nets.e_c, nets.head, nets.e_r, frozen=frozen)
    class_pos, cont_pos, class_neg, cont_neg = hybrid_criterion_terms(
        x_h, x1, x2, criterion, margin_class, margin_cont, squared)
    return HybridTerms(class_pos=class_pos, cont_pos=cont_pos,
                       class_neg=class_neg, cont_neg=cont_neg, x_h=x_h)


def contradict_loss(f_h, f_c, f_r, alpha):
    """MSE between the hybrid's predicted distribution and the alpha-blend
    of its parents' (gradient-stopped) predictions. Requires alpha > 0.5.
    """
    if not 0.5 < alpha <= 1.0:
        raise ValueError(f"alpha must be in (0.5, 1], got {alpha}")
    if f_h.shape != f_c.shape or f_h.shape != f_r.shape:
        raise ValueError("prediction shapes must match")
    target = alpha * f_c.detach() + (1.0 - alpha) * f_r.detach()
    return F.mse_loss(f_h, target)


@dataclass
class AltLossReport:
    loss: torch.Tensor
    n_used: int


def alt_hybrid_loss(mode, hybrid_logits, sem_labels=None, sem_probs=None):
    """Alternative hybrid-exploitation losses.

    labeled: hard cross-entropy, only on hybrids whose semantic parent is
    labeled (0 with a flag when none are). pseudo_label: hard cross-entropy
    against the semantic parent's argmax pseudo-label. consistency: MSE to
    the semantic parent's predicted distribution.
    """
    zero = hybrid_logits.sum() * 0.0
    if mode == "labeled":
        if sem_labels is None:
            raise ValueError("labeled mode needs sem_labels")
        mask = sem_labels != UNLABELED
        n = int(mask.sum())
        if n == 0:
            return AltLossReport(loss=zero, n_used=0)
        return AltLossReport(
            loss=F.cross_entropy(hybrid_logits[mask], sem_labels[mask]), n_used=n)
    if mode == "pseudo_label":
        if sem_probs is None:
            raise ValueError("pseudo_label mode needs sem_probs")
        pseudo = sem_probs.detach().argmax(dim=1)
        return AltLossReport(loss=F.cross_entropy(hybrid_logits, pseudo),
                             n_used=hybrid_logits.shape[0])
    if mode == "consistency":
        if sem_probs is None:
            raise ValueError("consistency mode needs sem_probs")
        return AltLossReport(
            loss=F.mse_loss(F.softmax(hybrid_logits, dim=1), sem_probs.detach()),
            n_used=hybrid_logits.shape[0])
    raise ValueError(f"unknown hybrid loss mode {mode!r}")


GEN_LOSS_COMPONENTS = ("rec", "adv_r", "sem", "hyb_class_pos", "hyb_cont_pos",
                       "hyb_class_neg", "hyb_cont_neg", "adv_h")


@dataclass
class GenLossReport:
    """Per-step generator-side loss components and their weighted total."""

    rec: float = 0.0
    adv_r: float = 0.0
    sem: float = 0.0
    hyb_class_pos: float = 0.0
    hyb_cont_pos: float = 0.0
    hyb_class_neg: float = 0.0
    hyb_cont_neg: float = 0.0
    adv_h: float = 0.0
    total: float = 0.0

    @classmethod
    def combine(cls, components, weights):
        """Weighted total as the dot product of components and weights."""
        total = sum(components[k] * weights[k] for k in GEN_LOSS_COMPONENTS)
        vals = {k: float(components[k].detach()) for k in GEN_LOSS_COMPONENTS}
        return total, cls(**vals, total=float(total.detach()))

    def as_row(self):
        return [getattr(self, f.name) for f in fields(self)]
