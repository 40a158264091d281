"""Patch clustering and the two-phase training procedure.

Phase 1 trains the global structure network alone on cross-entropy plus
the weighted polynomial ranking surrogate.  Phase 2 trains the local
refinement network while fine-tuning the global one: each minibatch is a
single sample's global inputs plus all of its boundary patches, and the
combined loss is loss_local + lambda2 * loss_global with the L2 penalty
applied inside the optimizer.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tape, Tensor, adam_step, backward
from .metrics import f1_inside, voxel_accuracy
from .nets import GlobalNet, LocalNet, crop_guidance, stack_face_images
from .seeding import derive_seed

log = logging.getLogger(__name__)


@dataclass
class LossWeights:
    """Loss balancing and optimizer schedule (defaults follow the method's
    reference setting)."""

    lambda1: float = 0.2          # ranking-surrogate weight in the global loss
    lambda2: float = 2.0 / 3.0    # global-loss weight during joint training
    lambda3: float = 0.001        # L2 regularization weight
    lr: float = 0.0001
    epochs: int = 20
    auc_degree: int = 5
    max_pairs: int = 4096

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3, self.lr) < 0:
            raise ValueError("loss weights must be nonnegative")


def cluster_patches(features, k, seed=0, max_iters=20):
    """PAM-style k-medoids under Hamming distance on binary features.

    Returns sorted indices of the k medoids.  Fewer candidates than k
    returns everything (logged).  Each iteration applies the single best
    (medoid, candidate) swap until no swap improves the total distance.
    """
    feats = np.asarray(features, dtype=np.float32)
    n = feats.shape[0]
    if n <= k:
        if n < k:
            log.warning("cluster_patches: only %d candidates for k=%d", n, k)
        return np.arange(n)
    ones = feats.sum(axis=1)
    cross = feats @ feats.T
    dist = ones[:, None] + ones[None, :] - 2 * cross  # pairwise Hamming
    rng = np.random.default_rng(seed)
    medoids = np.sort(rng.choice(n, size=k, replace=False))
    for _ in range(max_iters):
        d_med = dist[:, medoids]  # (n, k)
        order = np.argsort(d_med, axis=1)
        d1 = d_med[np.arange(n), order[:, 0]]
        d2 = d_med[np.arange(n), order[:, 1]] if k > 1 else np.full(n, np.inf)
        nearest = order[:, 0]
        current = d1.sum()
        best = (0.0, None, None)
        for mi in range(k):
            base = np.where(nearest == mi, d2, d1)
            costs = np.minimum(base[:, None], dist).sum(axis=0)
            costs[medoids] = np.inf
            ci = int(np.argmin(costs))
            delta = costs[ci] - current
            if delta < best[0] - 1e-9:
                best = (delta, mi, ci)
        if best[1] is None:
            break
        medoids[best[1]] = best[2]
        medoids = np.sort(medoids)
    return medoids


# ---------------------------------------------------------------------------
# loss assembly
# ---------------------------------------------------------------------------

def _onehot(labels):
    flat = np.asarray(labels, dtype=np.int64).reshape(-1)
    return np.eye(2, dtype=np.float32)[flat]


def _global_loss(net, sample, weights, coeffs, auc_seed, stats=None):
    g = net.cfg.profile.g
    images = Tensor(stack_face_images(sample.face_images))
    coarse = Tensor(sample.coarse.values[None])
    logits = net.forward(images, coarse)
    flat = ad.reshape(ad.permute(logits, (0, 2, 3, 4, 1)), (g ** 3, 2))
    labels = sample.labels_coarse.reshape(-1)
    ce = ad.softmax_cross_entropy(flat, _onehot(labels))
    if weights.lambda1 == 0:
        return ce, logits
    scores = ad.reshape(ad.narrow(ad.softmax(flat, axis=1), 1, 1, 1), (g ** 3,))
    if stats is not None and (labels.min() == labels.max()):
        stats["single_class_batches"] = stats.get("single_class_batches", 0) + 1
    rank = ad.auc_poly_loss(scores, labels, coeffs,
                            max_pairs=weights.max_pairs, seed=auc_seed)
    return ad.add(ce, ad.scale(rank, weights.lambda1)), logits


def _local_loss(lnet, sample, structure, profile):
    patches = np.stack([p.values for p in sample.patches])
    centers = np.stack([p.center for p in sample.patches])
    labels = np.stack([p.labels for p in sample.patches])
    crops = None
    if lnet.cfg.use_guidance:
        crops = crop_guidance(structure, centers, profile)
    logits = lnet.forward(Tensor(patches.astype(np.float32)), crops)
    b = patches.shape[0]
    p = profile.patch
    flat = ad.reshape(ad.permute(logits, (0, 2, 3, 4, 1)), (b * p ** 3, 2))
    return ad.softmax_cross_entropy(flat, _onehot(labels))


def _snapshot(store):
    return ({n: store[n].values.copy() for n in store.names()},
            copy.deepcopy(store.moments1), copy.deepcopy(store.moments2),
            store.step_count)


def _restore(store, snap):
    values, m1, m2, t = snap
    for n in store.names():
        store[n].values[...] = values[n]
    store.moments1.update(m1)
    store.moments2.update(m2)
    store.step_count = t


# ---------------------------------------------------------------------------
# evaluation helpers
# ---------------------------------------------------------------------------

def evaluate_global(net, samples):
    """Mean inside-label F1 over samples."""
    scores = []
    for s in samples:
        probs = net.infer(s.face_images, s.coarse)
        scores.append(f1_inside(probs.values[0], s.labels_coarse))
    return float(np.mean(scores)) if scores else 0.0


def evaluate_local(gnet, lnet, samples):
    """Mean patch voxel accuracy, using the current global net's output as
    guidance when the local config asks for it."""
    correct = []
    profile = lnet.cfg.profile
    for s in samples:
        if not s.patches:
            continue
        patches = np.stack([p.values for p in s.patches]).astype(np.float32)
        labels = np.stack([p.labels for p in s.patches])
        crops = None
        if lnet.cfg.use_guidance:
            structure = gnet.infer(s.face_images, s.coarse)
            centers = np.stack([p.center for p in s.patches])
            crops = crop_guidance(ad.constant(structure.values), centers, profile)
        probs = lnet.probability(Tensor(patches), crops)
        correct.append(voxel_accuracy(probs.values[:, 0], labels))
    return float(np.mean(correct)) if correct else 0.0


# ---------------------------------------------------------------------------
# training phases
# ---------------------------------------------------------------------------

def train_global(samples, cfg, weights, seed, heldout=None):
    """Phase 1: the global structure network alone.

    Returns (store, net, history).  One sample per optimizer step,
    epoch-shuffled; a non-finite loss aborts with the last epoch's
    parameters restored.
    """
    if not samples:
        raise ValueError("train_global needs a nonempty sample list")
    store = ParamStore()
    net = GlobalNet(cfg, store, seed=derive_seed(seed, "init-global"))
    coeffs, fit_err = ad.fit_step_polynomial(weights.auc_degree)
    rng = np.random.default_rng(derive_seed(seed, "epochs"))
    history = []
    snap = _snapshot(store)
    for epoch in range(weights.epochs):
        order = rng.permutation(len(samples))
        losses = []
        stats = {}
        for step, idx in enumerate(order):
            store.zero_grads()
            try:
                with Tape() as tape:
                    loss, _ = _global_loss(
                        net, samples[idx], weights, coeffs,
                        auc_seed=derive_seed(seed, "auc", epoch, step), stats=stats)
                value = loss.item()
                if not np.isfinite(value):
                    raise ad.NumericError("non-finite loss")
                backward(tape, loss)
                adam_step(store, lr=weights.lr, weight_decay=weights.lambda3)
            except ad.NumericError as err:
                log.error("phase 1 diverged at epoch %d step %d (%s); "
                          "restoring last epoch", epoch, step, err)
                _restore(store, snap)
                return store, net, history
            losses.append(value)
        snap = _snapshot(store)
        row = {"phase": 1, "epoch": epoch, "loss": float(np.mean(losses)),
               "f1_heldout": evaluate_global(net, heldout) if heldout else None,
               "single_class_batches": stats.get("single_class_batches", 0)}
        history.append(row)
        log.info("phase1 epoch %d: loss %.4f f1 %s", epoch, row["loss"],
                 f"{row['f1_heldout']:.3f}" if heldout else "-")
    return store, net, history


def train_joint(samples, global_store, global_cfg, local_cfg, weights, seed,
                heldout=None, freeze_global=False):
    """Phase 2: local refinement trained while the global net fine-tunes.

    Gradients reach the global parameters both through the weighted global
    loss term and through the guidance crops.  Returns
    (store, global net, local net, history).
    """
    if not samples:
        raise ValueError("train_joint needs a nonempty sample list")
    store = ParamStore()
    for name in global_store.names():
        store.add(name, Tensor(global_store[name].values.copy(), requires_grad=True))
    gnet = GlobalNet(global_cfg, store, init=False)
    lnet = LocalNet(local_cfg, store, seed=derive_seed(seed, "init-local"))
    coeffs, _ = ad.fit_step_polynomial(weights.auc_degree)
    trainable = None
    if freeze_global:
        trainable = [n for n in store.names() if not n.startswith("global.")]
    rng = np.random.default_rng(derive_seed(seed, "epochs-joint"))
    history = []
    snap = _snapshot(store)
    profile = global_cfg.profile
    for epoch in range(weights.epochs):
        order = rng.permutation(len(samples))
        losses = []
        stats = {}
        for step, idx in enumerate(order):
            sample = samples[idx]
            store.zero_grads()
            try:
                with Tape() as tape:
                    gloss, logits = _global_loss(
                        gnet, sample, weights, coeffs,
                        auc_seed=derive_seed(seed, "auc-joint", epoch, step),
                        stats=stats)
                    if sample.patches:
                        structure = ad.narrow(ad.softmax(logits, axis=1), 1, 1, 1)
                        lloss = _local_loss(lnet, sample, structure, profile)
                        loss = ad.add(lloss, ad.scale(gloss, weights.lambda2))
                    else:
                        loss = ad.scale(gloss, weights.lambda2)
                value = loss.item()
                if not np.isfinite(value):
                    raise ad.NumericError("non-finite loss")
                backward(tape, loss)
                adam_step(store, lr=weights.lr, weight_decay=weights.lambda3,
                          names=trainable)
            except ad.NumericError as err:
                log.error("phase 2 diverged at epoch %d step %d (%s); "
                          "restoring last epoch", epoch, step, err)
                _restore(store, snap)
                return store, gnet, lnet, history
            losses.append(value)
        snap = _snapshot(store)
        row = {"phase": 2, "epoch": epoch, "loss": float(np.mean(losses)),
               "f1_heldout": evaluate_global(gnet, heldout) if heldout else None,
               "local_accuracy": evaluate_local(gnet, lnet, heldout) if heldout else None,
               "single_class_batches": stats.get("single_class_batches", 0)}
        history.append(row)
        log.info("phase2 epoch %d: loss %.4f f1 %s acc %s", epoch, row["loss"],
                 f"{row['f1_heldout']:.3f}" if heldout else "-",
                 f"{row['local_accuracy']:.3f}" if heldout else "-")
    return store, gnet, lnet, history


def write_history_csv(path, history):
    import csv

    cols = ["phase", "epoch", "loss", "f1_heldout", "local_accuracy",
            "single_class_batches"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols)
        writer.writeheader()
        for row in history:
            writer.writerow({c: row.get(c) for c in cols})
    return path
