"""
Verification suites: randomized comparisons against brute-force oracles.

Each suite returns a list of failure descriptions; cmd_verify raises
VerificationError when any suite reports one.
"""

from collections import deque
import gzip
import logging
import tempfile
from pathlib import Path
from typing import Callable

import numpy as np

from align import ChannelStats, ReferenceStore, channel_stats, distribution_loss, merge_stats, stats_of_array
from datamodels import (
    AnyADConfig,
    DecoderConfig,
    EncoderConfig,
    InpConfig,
    ModalityMask,
    TrainConfig,
    VerificationError,
)
from dataio import nifti_encode, nifti_read
from decoder import block_forward
from inp import consistency_loss, extract, init_prototype_params, nearest_distances
from metrics import ScoredSet, aupro, auroc, average_precision, connected_components, f1_max
from pipeline import AnyADModel
from scoring import score_batch
from tensorgrad import Tensor, finite_diff_check, no_grad, ops, parameter, precision
from tensorgrad.layers import apply_linear
from training import adaptive_weights, reconstruction_loss, total_loss

logger = logging.getLogger(__name__)

GRAD_TOL = 1e-4


def tiny_config(seed: int = 0) -> AnyADConfig:
    """D=8, T=4, N=2, L_d=2: small enough for exhaustive finite differences."""
    return AnyADConfig(
        encoder=EncoderConfig(
            image_size=8, patch_size=4, embed_dim=8, depth=2, heads=2, shallow_layers=[1], deep_layers=[2], seed=seed
        ),
        inp=InpConfig(num_prototypes=2, init_std=0.5),
        decoder=DecoderConfig(depth=2, group0_layers=[1], group1_layers=[2]),
        train=TrainConfig(seed=seed, batch_size=2, align_points=["bn"]),
    )


def decoder_attention_margins(model: AnyADModel, batch: np.ndarray, mask: ModalityMask) -> tuple[float, float]:
    """
    Smallest per-row maximum of Q K^T over all decoder blocks, and the
    smallest |Q K^T| entry. A row with no positive score yields a zero
    token, which puts the cosine reconstruction term on its eps kink.
    """
    with no_grad():
        out = model.forward(batch, mask)
        h, row_max, closest = out.f_bn, np.inf, np.inf
        for layer in range(1, model.cfg.decoder.depth + 1):
            name = f"decoder.block{layer}"
            q = apply_linear(h, model.params, f"{name}.q")
            k = apply_linear(out.inp.p, model.params, f"{name}.k")
            scores = np.einsum("btd,bnd->btn", q.data, k.data)
            row_max = min(row_max, float(scores.max(axis=-1).min()))
            closest = min(closest, float(np.abs(scores).min()))
            h = block_forward(
                h,
                out.inp.p,
                model.params,
                name,
                normalize_attention=model.cfg.decoder.normalize_attention,
                attn_residual=model.cfg.decoder.attn_residual,
            )
    return row_max, closest


def live_verification_model(
    seed: int, batch: np.ndarray, mask: ModalityMask, attempts: int = 64, margin: float = 1e-3
) -> AnyADModel:
    """
    First tiny model, over successive student seeds, whose decoder attention
    has a positive score in every row and no score within margin of the ReLU
    kink, so finite differences stay on one linear piece.
    """
    for attempt in range(attempts):
        cfg = tiny_config(seed)
        cfg = cfg.model_copy(update={"train": cfg.train.model_copy(update={"seed": seed + attempt})})
        model = AnyADModel.initialize(cfg)
        row_max, closest = decoder_attention_margins(model, batch, mask)
        if row_max > margin and closest > margin:
            return model
    raise VerificationError(f"no live decoder attention within {attempts} initializations from seed {seed}")


# ============================================================================
# gradcheck
# ============================================================================


def suite_gradcheck(seed: int) -> list[str]:
    failures = []
    rng = np.random.default_rng(seed)

    def check(name: str, f: Callable[[], Tensor], params) -> None:
        report = finite_diff_check(f, params, h=1e-5, tol=GRAD_TOL)
        for entry in report.failures():
            failures.append(f"gradcheck {name}/{entry.name}: rel err {entry.max_rel_error:.2e}")

    with precision("f64"):
        a = parameter(rng.normal(size=(3, 4)), "a")
        b = parameter(rng.normal(size=(4, 5)), "b")
        c = Tensor(rng.normal(size=(3, 5)))
        check(
            "matmul+softmax+cosine",
            lambda: ops.mean(ops.cosine_distance_rows(ops.softmax_lastdim(ops.matmul(a, b)), c)),
            [a, b],
        )

        tokens = Tensor(rng.normal(size=(1, 8, 4)))
        proto_params = init_prototype_params(InpConfig(num_prototypes=3, init_std=0.5), 4, rng)
        check(
            "consistency",
            lambda: consistency_loss(nearest_distances(tokens, extract(tokens, proto_params))[0]),
            list(proto_params.values()),
        )

        features = parameter(rng.normal(size=(2, 4, 3)), "features")
        ref = stats_of_array(rng.normal(size=(5, 4, 3)))
        check("alignment", lambda: distribution_loss(channel_stats(features), ref), [features])

        batch = rng.random((2, 3, 8, 8))
        mask = ModalityMask.from_combo(4)
        model = live_verification_model(seed, batch, mask)
        cfg = model.cfg
        with no_grad():
            out0 = model.forward(batch, ModalityMask.full())
            masked = model.forward(batch, mask)
        if min(np.linalg.norm(masked.de0.data, axis=-1).min(), np.linalg.norm(masked.de1.data, axis=-1).min()) == 0.0:
            failures.append("gradcheck objective: decoder output is zero")
            return failures
        # adaptive weights are constants under backward
        omega = adaptive_weights(masked.inp.token_dist.data, cfg.train.gamma)
        refs = ReferenceStore(
            points={"bn": stats_of_array(out0.f_bn.data)},
            attachment=["bn"],
        )

        def objective() -> Tensor:
            out = model.forward(batch, mask)
            l_rec = reconstruction_loss(out.bundle, out.de0, out.de1, omega)
            l_con = consistency_loss(out.inp.token_dist)
            l_dist = refs.alignment_loss(model.attachment_features(out))
            return total_loss(l_rec, l_con, l_dist, cfg.train)

        check("objective", objective, model.trainable())
    return failures


# ============================================================================
# metrics
# ============================================================================


def oracle_auroc(scores: np.ndarray, labels: np.ndarray) -> float:
    pos, neg = scores[labels == 1], scores[labels == 0]
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return float(wins / (pos.size * neg.size))


def oracle_ap(scores: np.ndarray, labels: np.ndarray) -> float:
    total, previous_recall = 0.0, 0.0
    for t in np.unique(scores)[::-1]:
        predicted = scores >= t
        tp = int((predicted & (labels == 1)).sum())
        recall = tp / int(labels.sum())
        total += (recall - previous_recall) * tp / int(predicted.sum())
        previous_recall = recall
    return total


def oracle_f1(scores: np.ndarray, labels: np.ndarray) -> float:
    best = 0.0
    for t in np.unique(scores):
        predicted = scores >= t
        tp = int((predicted & (labels == 1)).sum())
        fp = int((predicted & (labels == 0)).sum())
        fn = int((~predicted & (labels == 1)).sum())
        best = max(best, 2.0 * tp / (2.0 * tp + fp + fn))
    return best


def oracle_regions(mask: np.ndarray) -> list[np.ndarray]:
    """Breadth-first flood fill over the 8 neighbours, seeded in raster order."""
    h, w = mask.shape
    seen = np.zeros((h, w), dtype=bool)
    regions = []
    for y in range(h):
        for x in range(w):
            if not mask[y, x] or seen[y, x]:
                continue
            seen[y, x] = True
            queue, pixels = deque([(y, x)]), []
            while queue:
                cy, cx = queue.popleft()
                pixels.append(cy * w + cx)
                for dy in (-1, 0, 1):
                    for dx in (-1, 0, 1):
                        ny, nx = cy + dy, cx + dx
                        if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not seen[ny, nx]:
                            seen[ny, nx] = True
                            queue.append((ny, nx))
            regions.append(np.array(sorted(pixels)))
    return regions


def oracle_aupro(maps: list[np.ndarray], masks: list[np.ndarray], limit: float) -> float:
    regions = [(i, r) for i, m in enumerate(masks) for r in oracle_regions(m)]
    normal = np.concatenate([(m.reshape(-1) == 0) for m in masks])
    scores = np.concatenate([m.reshape(-1) for m in maps])
    points = [(0.0, 0.0)]
    for t in np.unique(scores)[::-1]:
        fpr = float(((scores >= t) & normal).sum() / normal.sum())
        pro = float(np.mean([(maps[i].reshape(-1)[r] >= t).mean() for i, r in regions]))
        points.append((fpr, pro))
    area = 0.0
    for (f0, p0), (f1, p1) in zip(points, points[1:]):
        if f1 <= limit:
            area += (f1 - f0) * (p0 + p1) / 2.0
        else:
            area += (limit - f0) * p0
            break
    return area / limit


def suite_metrics(seed: int, instances: int = 50) -> list[str]:
    failures = []
    rng = np.random.default_rng(seed)
    for i in range(instances):
        n = int(rng.integers(8, 257))
        labels = rng.integers(0, 2, size=n)
        labels[:2] = (0, 1)
        scores = np.round(rng.random(n), int(rng.integers(1, 4)))
        s = ScoredSet(scores, labels)
        if abs(auroc(s) - oracle_auroc(scores, labels)) > 1e-12:
            failures.append(f"metrics auroc instance {i}")
        if abs(average_precision(s) - oracle_ap(scores, labels)) > 1e-12:
            failures.append(f"metrics ap instance {i}")
        if abs(f1_max(s)[0] - oracle_f1(scores, labels)) > 1e-12:
            failures.append(f"metrics f1 instance {i}")

    for i in range(instances):
        size = int(rng.integers(4, 33))
        masks = [(rng.random((size, size)) > 0.8).astype(np.uint8) for _ in range(3)]
        masks[0][0, 0] = 1
        maps = [np.round(rng.random((size, size)) + 0.5 * m, 2) for m in masks]
        found = [r for m in masks for r in connected_components(m)]
        expected = [r for m in masks for r in oracle_regions(m)]
        if len(found) != len(expected) or not all(np.array_equal(a, b) for a, b in zip(found, expected)):
            failures.append(f"metrics regions instance {i}")
        if abs(aupro(maps, masks, 0.3) - oracle_aupro(maps, masks, 0.3)) > 1e-6:
            failures.append(f"metrics aupro instance {i}")
    return failures


# ============================================================================
# stats
# ============================================================================


def suite_stats(seed: int) -> list[str]:
    failures = []
    rng = np.random.default_rng(seed)
    for i in range(20):
        data = rng.normal(loc=rng.normal(), scale=rng.uniform(0.1, 3.0), size=(int(rng.integers(2, 12)), 5, 4))
        whole = stats_of_array(data)
        cuts = np.sort(rng.choice(np.arange(1, len(data)), size=min(2, len(data) - 1), replace=False))
        merged = ChannelStats.zeros(4)
        for part in np.split(data, cuts):
            merged = merge_stats(merged, stats_of_array(part))
        if merged.count != whole.count:
            failures.append(f"stats count instance {i}")
        same_mean = np.allclose(merged.mean.data, whole.mean.data, atol=1e-8, rtol=0)
        same_var = np.allclose(merged.var.data, whole.var.data, atol=1e-8, rtol=0)
        if not (same_mean and same_var):
            failures.append(f"stats merge instance {i}")
        with precision("f64"):
            differentiable = channel_stats(Tensor(data))
        if np.abs(differentiable.var.data - data.reshape(-1, 4).var(axis=0)).max() > 1e-10:
            failures.append(f"stats population variance instance {i}")
    return failures


# ============================================================================
# masking
# ============================================================================


def suite_masking(seed: int, trials: int = 100) -> list[str]:
    failures = []
    rng = np.random.default_rng(seed)
    for i in range(trials):
        model = AnyADModel.initialize(tiny_config(int(rng.integers(0, 2**31))))
        mask = ModalityMask.from_combo(int(rng.integers(1, 8)))
        x = rng.random((2, 3, 8, 8)).astype(np.float32)
        y = x.copy()
        for channel, present in enumerate(mask.present):
            if not present:
                y[:, channel] = rng.random((2, 8, 8))
        with no_grad():
            first, second = model.forward(x, mask), model.forward(y, mask)
        if not (np.array_equal(first.de0.data, second.de0.data) and np.array_equal(first.de1.data, second.de1.data)):
            failures.append(f"masking features trial {i}")
        cfg = model.cfg.score.model_copy(update={"sigma": 1.0})
        scores_x = [m.image_score for m in score_batch(model, x, mask, cfg)]
        scores_y = [m.image_score for m in score_batch(model, y, mask, cfg)]
        if scores_x != scores_y:
            failures.append(f"masking scores trial {i}")
    return failures


# ============================================================================
# nifti
# ============================================================================


def suite_nifti(seed: int) -> list[str]:
    failures = []
    rng = np.random.default_rng(seed)
    with tempfile.TemporaryDirectory() as tmp:
        for datatype, dtype in ((2, np.uint8), (4, np.int16), (8, np.int32), (16, np.float32), (64, np.float64)):
            voxels = (rng.random((4, 5, 3)) * 100).astype(dtype)
            expected = voxels.astype(np.float32)
            for order in ("<", ">"):
                raw = nifti_encode(voxels, datatype=datatype, byte_order=order)
                for compress in (False, True):
                    path = Path(tmp) / f"v{datatype}{'be' if order == '>' else 'le'}.nii{'.gz' if compress else ''}"
                    path.write_bytes(gzip.compress(raw, mtime=0) if compress else raw)
                    volume = nifti_read(path)
                    if not np.array_equal(volume.voxels, expected):
                        failures.append(f"nifti datatype {datatype} order {order} gzip {compress}")
    return failures


SUITES: dict[str, Callable[[int], list[str]]] = {
    "gradcheck": suite_gradcheck,
    "metrics": suite_metrics,
    "stats": suite_stats,
    "masking": suite_masking,
    "nifti": suite_nifti,
}


def cmd_verify(args) -> dict:
    """
    Run one suite or all of them.

    Raises:
        VerificationError: when any suite reports a failure
    """
    names = list(SUITES) if args.suite == "all" else [args.suite]
    seed = 0 if args.seed is None else args.seed
    failures = []
    for name in names:
        found = SUITES[name](seed)
        logger.info(f"verify {name}: {'ok' if not found else f'{len(found)} failure(s)'}")
        failures.extend(found)
    if failures:
        raise VerificationError("; ".join(failures[:10]))
    return {"status": "success", "suites": names}
