"""Self-verification suite: every check pairs a pipeline operation with an
independent oracle (brute-force attention, a reference transport solver,
direct window arithmetic, finite differences) or a frozen identity.

Each check returns (passed, detail); ``run_all`` executes the registry in
order and reports one result per check. The ``corrupt`` hook deliberately
breaks one primitive so the harness itself can be tested for sensitivity.
"""

from __future__ import annotations

import os
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import ndarray as nd
from .attention import AttentionWeights, cross_attention
from .attention import axial_attention_height, axial_attention_width, relative_logits
from .context import CepLayerWeights, cep_step, make_context_features
from .formats import (
    FormatError,
    ImagePair,
    RunConfig,
    WeightStore,
    parse_config,
    read_pfm,
    read_pgm,
    read_weights,
    write_pfm,
    write_pgm,
    write_weights,
)
from .losses import binary_entropy_loss, finite_diff_check, relative_response_loss
from .losses import GtBundle, smooth_l1, total_loss
from .matching import AssignmentVolume, epipolar_mask, regress_raw, sinkhorn
from .metrics import epe, occ_iou, three_px_error
from .pipeline import ModelDescription, forward, init_weights
from .ndarray import Rng, seeded_normal

__all__ = ["CHECKS", "run_all", "corrupted_softmax"]


def _random_attention_weights(rng: Rng, c: int, heads: int, span: int) -> AttentionWeights:
    std = 1.0 / np.sqrt(c)
    return AttentionWeights(
        Wq=seeded_normal(rng, (c, c), std),
        Wk=seeded_normal(rng, (c, c), std),
        Wv=seeded_normal(rng, (c, c), std),
        Wo=seeded_normal(rng, (c, c), std),
        rel_pos=seeded_normal(rng, (2 * span - 1, c // heads), 0.1),
    )


def _dense_attention_oracle(
    x_q: np.ndarray,
    x_kv: np.ndarray,
    w: AttentionWeights,
    heads: int,
    mask: np.ndarray | None = None,
) -> np.ndarray:
    """Loop-based float64 dense attention over one token line."""
    n, c = x_q.shape
    m = x_kv.shape[0]
    ch = c // heads
    span = w.span
    xq = x_q.astype(np.float64)
    xk = x_kv.astype(np.float64)
    rel = w.rel_pos.astype(np.float64)
    out = np.zeros((n, c))
    for h in range(heads):
        hs = slice(h * ch, (h + 1) * ch)
        wq = w.Wq.astype(np.float64)
        wk = w.Wk.astype(np.float64)
        logits = np.zeros((n, m))
        for i in range(n):
            qi = xq[i] @ wq[:, hs]
            for j in range(m):
                kj = xk[j] @ wk[:, hs]
                r = rel[j - i + span - 1]
                pq = r @ wq[hs, hs]
                pk = r @ wk[hs, hs]
                logits[i, j] = (qi @ kj + qi @ pk + pq @ kj) / np.sqrt(ch)
                if mask is not None:
                    logits[i, j] += mask[i, j]
        for i in range(n):
            row = logits[i]
            e = np.exp(row - row.max())
            attn = e / e.sum()
            acc = np.zeros(ch)
            for j in range(m):
                acc += attn[j] * (xk[j] @ w.Wv.astype(np.float64)[:, hs])
            out[i, hs] = acc
    return out @ w.Wo.astype(np.float64)


def check_softmax_normalization() -> tuple[bool, str]:
    rng = Rng(11)
    worst = 0.0
    for _ in range(30):
        t = (rng.generator.random((5, 7), dtype=np.float32) - 0.5) * 100
        s = nd.softmax_axis(t, axis=1)
        worst = max(worst, float(np.abs(s.sum(axis=1) - 1).max()))
        if (s < 0).any():
            return False, "negative softmax output"
    return worst < 1e-6, f"max |sum-1| = {worst:.2e}"


def _axial_check(direction: str) -> tuple[bool, str]:
    rng = Rng(21 if direction == "width" else 22)
    worst = 0.0
    start = time.perf_counter()
    for case in range(20):
        c = int(rng.generator.integers(2, 5)) * 2
        heads = 2 if c % 2 == 0 else 1
        h = int(rng.generator.integers(1, 17))
        w = int(rng.generator.integers(1, 17))
        weights = _random_attention_weights(rng, c, heads, span=16)
        f = seeded_normal(rng, (c, h, w), 1.0)
        if direction == "width":
            got = axial_attention_width(f, weights, heads)
            lines = [f[:, y, :].T for y in range(h)]
        else:
            got = axial_attention_height(f, weights, heads)
            lines = [f[:, :, x].T for x in range(w)]
        for idx, line in enumerate(lines):
            want = line + _dense_attention_oracle(line, line, weights, heads)
            if direction == "width":
                diff = np.abs(got[:, idx, :].T - want).max()
            else:
                diff = np.abs(got[:, :, idx].T - want).max()
            worst = max(worst, float(diff))
    elapsed = time.perf_counter() - start
    return worst < 1e-5 and elapsed < 10.0, f"max |diff| = {worst:.2e}, {elapsed:.2f}s"


def check_axial_width_dense_oracle() -> tuple[bool, str]:
    return _axial_check("width")


def check_axial_height_dense_oracle() -> tuple[bool, str]:
    return _axial_check("height")


def check_cross_attention_dense_oracle() -> tuple[bool, str]:
    rng = Rng(23)
    worst = 0.0
    for case in range(10):
        c, heads = 4, 2
        h = int(rng.generator.integers(1, 5))
        w = int(rng.generator.integers(2, 9))
        weights = _random_attention_weights(rng, c, heads, span=16)
        left = seeded_normal(rng, (c, h, w), 1.0)
        right = seeded_normal(rng, (c, h, w), 1.0)
        mask = epipolar_mask(w, w) if case % 2 == 0 else None
        got_l, got_r, _ = cross_attention(left, right, weights, heads, mask)
        for y in range(h):
            lq = left[:, y, :].T
            rq = right[:, y, :].T
            want_l = lq + _dense_attention_oracle(lq, rq, weights, heads, mask)
            mask_t = None if mask is None else mask.T
            want_r = rq + _dense_attention_oracle(rq, lq, weights, heads, mask_t)
            worst = max(worst, float(np.abs(got_l[:, y, :].T - want_l).max()))
            worst = max(worst, float(np.abs(got_r[:, y, :].T - want_r).max()))
    return worst < 1e-5, f"max |diff| = {worst:.2e}"


def check_position_encoding_structure() -> tuple[bool, str]:
    rng = Rng(24)
    c, heads, span, n = 8, 2, 12, 6
    ch = c // heads
    weights = _random_attention_weights(rng, c, heads, span)
    x = seeded_normal(rng, (n, c), 1.0)
    zero_rel = AttentionWeights(
        weights.Wq, weights.Wk, weights.Wv, weights.Wo,
        np.zeros_like(weights.rel_pos),
    )
    for head in range(heads):
        hs = slice(head * ch, (head + 1) * ch)
        content = ((x @ weights.Wq)[:, hs] @ (x @ weights.Wk)[:, hs].T) / np.float32(
            np.sqrt(ch)
        )
        got = relative_logits(x, zero_rel, head)
        if not np.array_equal(got, content):
            return False, f"head {head}: zero embeddings leave a position term"
        got_zero = relative_logits(np.zeros_like(x), weights, head)
        if not np.array_equal(got_zero, np.zeros((n, n), dtype=np.float32)):
            return False, f"head {head}: zero content gives nonzero logits"
    return True, "content-only and zero-content identities hold exactly"


def _reference_sinkhorn(cost: np.ndarray, iters: int, eps: float, dustbin: float):
    """Multiplicative-domain float64 transport solver (independent oracle)."""
    n, m = cost.shape
    full = np.full((n + 1, m + 1), dustbin, dtype=np.float64)
    full[:n, :m] = cost.astype(np.float64)
    kernel = np.exp(-full / eps)
    a = np.concatenate([np.ones(n), [float(m)]])
    b = np.concatenate([np.ones(m), [float(n)]])
    u = np.ones(n + 1)
    v = np.ones(m + 1)
    for _ in range(iters):
        v = b / (kernel.T @ u)
        u = a / (kernel @ v)
    return u[:, None] * kernel * v[None, :]


def check_sinkhorn_row_marginals() -> tuple[bool, str]:
    rng = Rng(31)
    worst_row = 0.0
    worst_total = 0.0
    for _ in range(20):
        n = int(rng.generator.integers(1, 65))
        m = int(rng.generator.integers(1, 65))
        cost = (rng.generator.random((n, m), dtype=np.float32)) * 10
        plan = sinkhorn(cost, iters=10, epsilon=0.1)
        rows = plan[:n].sum(axis=1)
        worst_row = max(worst_row, float(np.abs(rows - 1).max()))
        worst_total = max(worst_total, float(abs(plan.sum() - (n + m))))
    ok = worst_row < 1e-4 and worst_total < 1e-4
    return ok, f"row err {worst_row:.2e}, total err {worst_total:.2e}"


def check_sinkhorn_masked_cells() -> tuple[bool, str]:
    rng = Rng(32)
    worst = 0.0
    for _ in range(10):
        n, m = 12, 12
        cost = rng.generator.random((n, m), dtype=np.float32) * 5
        blocked = -epipolar_mask(n, m)  # +inf where forbidden
        plan = sinkhorn(cost + blocked, iters=10, epsilon=0.1)
        masked = plan[:n, :m][np.isposinf(blocked)]
        worst = max(worst, float(masked.max()) if masked.size else 0.0)
    return worst < 1e-8, f"max masked mass = {worst:.2e}"


def check_sinkhorn_reference_agreement() -> tuple[bool, str]:
    rng = Rng(33)
    worst = 0.0
    for _ in range(10):
        n = int(rng.generator.integers(1, 9))
        m = int(rng.generator.integers(1, 9))
        cost = rng.generator.random((n, m), dtype=np.float32) * 4
        got = sinkhorn(cost, iters=10, epsilon=0.1)
        want = _reference_sinkhorn(cost, iters=10, eps=0.1, dustbin=0.0)
        worst = max(worst, float(np.abs(got - want).max()))
    return worst < 1e-4, f"max |plan diff| = {worst:.2e}"


def _direct_regression(row: np.ndarray, i: int) -> tuple[float, float]:
    """Direct float32 window arithmetic for one plan row of real candidates."""
    m = row.shape[0]
    anchor = int(np.argmax(row))
    lo, hi = max(0, anchor - 1), min(m - 1, anchor + 1)
    mass = np.float32(0)
    for j in range(lo, hi + 1):
        mass = mass + row[j]
    disparity = np.float32(0)
    for j in range(lo, hi + 1):
        disparity = disparity + np.float32(abs(i - j)) * (row[j] / mass)
    occ = min(max(1.0 - float(mass), 0.0), 1.0)
    return float(disparity), occ


def check_disparity_regression_oracle() -> tuple[bool, str]:
    rng = Rng(41)
    worst = 0.0
    for _ in range(100):
        n = int(rng.generator.integers(2, 13))
        m = int(rng.generator.integers(2, 13))
        plan = rng.generator.random((1, n + 1, m + 1), dtype=np.float32)
        disp, occ = regress_raw(AssignmentVolume(plan))
        for i in range(n):
            want_d, want_o = _direct_regression(plan[0, i, :m], i)
            worst = max(worst, abs(float(disp.values[0, i]) - want_d))
            worst = max(worst, abs(float(occ.probs[0, i]) - want_o))
    # frozen worked example: window scores summing to 1 over candidate
    # disparities 4/5/6 with weights 0.2/0.5/0.3 regress to 5.1, occlusion 0
    plan = np.zeros((1, 9, 9), dtype=np.float32)  # 8 real pixels a side
    plan[0, :8, 7] = 0.01  # keep every left pixel regressable
    plan[0, 7, 3] = 0.2  # |7-3| = 4
    plan[0, 7, 2] = 0.5  # |7-2| = 5
    plan[0, 7, 1] = 0.3  # |7-1| = 6
    disp, occ = regress_raw(AssignmentVolume(plan))
    example_ok = (
        abs(float(disp.values[0, 7]) - 5.1) < 1e-6
        and float(occ.probs[0, 7]) == 0.0
    )
    return worst < 1e-7 and example_ok, f"max |diff| = {worst:.2e}"


def check_gradcheck_relative_response() -> tuple[bool, str]:
    worst = 0.0
    for seed in range(20):
        rng = Rng(100 + seed)
        plan = rng.generator.random((1, 6, 6), dtype=np.float32) + 0.05
        # disparity d <= i keeps the interpolation position i - d on the line
        slack = rng.generator.random((1, 5), dtype=np.float32)
        gt_disp = slack * np.arange(5, dtype=np.float32)[None, :]
        gt_occ = rng.generator.random((1, 5)) < 0.4
        gt = GtBundle(gt_disp, gt_occ)

        def loss_fn(arr):
            return relative_response_loss(AssignmentVolume(arr), gt)[0]

        _, grad = relative_response_loss(AssignmentVolume(plan), gt)
        worst = max(worst, finite_diff_check(loss_fn, plan, grad, step=1e-4))
    return worst < 1e-3, f"max rel err = {worst:.2e}"


def check_gradcheck_smooth_l1() -> tuple[bool, str]:
    worst = 0.0
    for seed in range(20):
        rng = Rng(200 + seed)
        pred = rng.generator.random((4, 4), dtype=np.float32) * 4
        gt = rng.generator.random((4, 4), dtype=np.float32) * 4
        mask = np.ones((4, 4), dtype=bool)

        def loss_fn(arr):
            return smooth_l1(arr, gt, mask)[0]

        _, grad = smooth_l1(pred, gt, mask)
        worst = max(worst, finite_diff_check(loss_fn, pred, grad, step=1e-4))
    return worst < 1e-3, f"max rel err = {worst:.2e}"


def check_gradcheck_binary_entropy() -> tuple[bool, str]:
    worst = 0.0
    for seed in range(20):
        rng = Rng(300 + seed)
        pred = rng.generator.random((4, 4), dtype=np.float32) * 0.9 + 0.05
        gt = (rng.generator.random((4, 4)) < 0.5).astype(np.float32)

        def loss_fn(arr):
            return binary_entropy_loss(arr, gt)[0]

        _, grad = binary_entropy_loss(pred, gt)
        worst = max(worst, finite_diff_check(loss_fn, pred, grad, step=1e-4))
    return worst < 1e-3, f"max rel err = {worst:.2e}"


def check_cep_payload_schedule() -> tuple[bool, str]:
    rng = Rng(51)
    c, heads, layers = 4, 2, 6
    counts = {}
    for strategy in ("M1", "M2", "M3"):
        feat = seeded_normal(Rng(52), (c, 4, 8), 1.0)
        state = make_context_features(feat, feat, 1, strategy)
        layer_weights = [
            CepLayerWeights(
                wax=_random_attention_weights(rng, c, heads, 8),
                hax=_random_attention_weights(rng, c, heads, 8),
                cross=_random_attention_weights(rng, c, heads, 8),
            )
            for _ in range(layers)
        ]
        emitted = []
        for layer in range(layers):
            state, payload = cep_step(state, layer, layers, layer_weights[layer], heads)
            emitted.append(payload is not None)
        counts[strategy] = emitted
    ok = (
        sum(counts["M1"]) == 6
        and sum(counts["M3"]) == 6
        and counts["M2"] == [False] * 5 + [True]
    )
    return ok, f"payload flags M1={sum(counts['M1'])} M2={counts['M2']} M3={sum(counts['M3'])}"


def check_epipolar_mask_convention() -> tuple[bool, str]:
    mask = epipolar_mask(3, 3)
    allowed = np.isfinite(mask)
    want = np.array(
        [[True, True, True], [False, True, True], [False, False, True]]
    )
    flipped = np.isfinite(epipolar_mask(3, 3, flip=True))
    ok = (
        np.array_equal(allowed, want)
        and int(allowed.sum()) == 6
        and np.array_equal(flipped, want.T)
    )
    return ok, f"default allows {int(allowed.sum())}/9, flip allows {int(flipped.sum())}/9"


def check_metric_identities() -> tuple[bool, str]:
    gt = np.arange(16, dtype=np.float32).reshape(4, 4)
    mask = np.ones((4, 4), dtype=bool)
    checks = [
        epe(gt, gt, mask) == 0.0,
        three_px_error(gt, gt, mask) == 0.0,
        epe(gt + 4, gt, mask) == 4.0,
        three_px_error(gt + 4, gt, mask) == 100.0,
        occ_iou(mask, mask) == 1.0,
        occ_iou(mask, np.zeros((4, 4), dtype=bool)) == 0.0,
    ]
    half = np.where(np.arange(16).reshape(4, 4) % 2 == 0, 2.0, 6.0).astype(np.float32)
    checks.append(epe(gt + half, gt, mask) == 4.0)
    checks.append(three_px_error(gt + half, gt, mask) == 50.0)
    return all(checks), f"{sum(checks)}/{len(checks)} identities hold"


def check_loss_composition() -> tuple[bool, str]:
    parts = (1.0, 2.0, 3.0, 4.0)
    if total_loss(*parts).total != 10.0:
        return False, "unit weights broke"
    if total_loss(5.0, 5.0, 2.0, 5.0, 0.0, 0.0, 1.0, 0.0).total != 2.0:
        return False, "selector weights broke"
    base = total_loss(*parts, 1.0, 1.0, 1.0, 1.0).total
    for k, delta in enumerate([0.25, 0.5, 0.75, 1.5]):
        w = [1.0, 1.0, 1.0, 1.0]
        w[k] += delta
        bumped = total_loss(*parts, *w).total
        if abs((bumped - base) - delta * parts[k]) > 1e-12:
            return False, f"linearity in w{k + 1} broke"
    return True, "weighted-sum identity and linearity hold"


def check_config_defaults() -> tuple[bool, str]:
    cfg = parse_config("")
    ok = (
        cfg.layers == 6
        and cfg.channels == 128
        and cfg.heads == 4
        and cfg.mmp_scale == 0.25
        and cfg.sinkhorn_iters == 10
        and cfg.cep_strategy == "M3"
        and cfg.cep_width_factor == 2
        and cfg.sinkhorn_epsilon == 0.1
        and (cfg.w1, cfg.w2, cfg.w3, cfg.w4) == (1.0, 1.0, 1.0, 1.0)
        and cfg.seed == 0
    )
    return ok, "defaults: layers=6 channels=128 heads=4 mmp_scale=1/4 sinkhorn_iters=10"


def check_format_roundtrips() -> tuple[bool, str]:
    rng = Rng(61)
    with tempfile.TemporaryDirectory() as tmp:
        for case in range(100):
            h = int(rng.generator.integers(1, 9))
            w = int(rng.generator.integers(1, 9))
            kind = case % 3
            if kind == 0:
                path = os.path.join(tmp, "x.pfm")
                t = (rng.generator.random((h, w), dtype=np.float32) - 0.5) * 100
                write_pfm(path, t)
                if not np.array_equal(read_pfm(path), t):
                    return False, f"PFM round trip broke on case {case}"
            elif kind == 1:
                path = os.path.join(tmp, "x.pgm")
                grid = rng.generator.integers(0, 256, size=(h, w))
                t = grid.astype(np.float32) / np.float32(255)
                write_pgm(path, t)
                if not np.array_equal(read_pgm(path), t):
                    return False, f"PGM round trip broke on case {case}"
            else:
                path = os.path.join(tmp, "x.cstrw")
                store = WeightStore()
                for k in range(int(rng.generator.integers(0, 4))):
                    rank = int(rng.generator.integers(1, 4))
                    shape = tuple(int(rng.generator.integers(1, 5)) for _ in range(rank))
                    store[f"t{k}"] = seeded_normal(rng, shape, 1.0)
                write_weights(path, store)
                if not read_weights(path) == store:
                    return False, f"weight round trip broke on case {case}"
        bad = os.path.join(tmp, "bad.bin")
        malformed = [
            b"",
            b"PF\n2 2\n-1.0\n" + b"\x00" * 48,
            b"Pf\n2 2\n-1.0\n" + b"\x00" * 7,
            b"Pf\nx y\n-1.0\n",
            b"P5\n2 2\n0\n\x00\x00\x00\x00",
            b"P6\n2 2\n255\n" + b"\x00" * 12,
            b"CSTRW999" + b"\x00" * 4,
            b"CSTRW001" + b"\x02\x00\x00\x00" + b"\x01\x00b\x01\x05\x00\x00\x00",
        ]
        for idx, blob in enumerate(malformed):
            with open(bad, "wb") as f:
                f.write(blob)
            for reader in (read_pfm, read_pgm, read_weights):
                try:
                    reader(bad)
                except FormatError:
                    pass
                except Exception as exc:  # noqa: BLE001 - the check's whole point
                    return False, f"malformed case {idx}: {type(exc).__name__} leaked"
    return True, "100 round trips bit-exact, malformed inputs raise FormatError"


def _tiny_model() -> tuple[ImagePair, ModelDescription]:
    config = RunConfig(layers=2, channels=8, heads=2)
    store = init_weights(config, span=16, seed=0)
    model = ModelDescription(config, store)
    rng = Rng(0)
    left = rng.generator.random((1, 16, 32), dtype=np.float32)
    right = rng.generator.random((1, 16, 32), dtype=np.float32)
    return ImagePair(left, right), model


def check_forward_determinism() -> tuple[bool, str]:
    pair, model = _tiny_model()
    start = time.perf_counter()
    disp_a, occ_a, _ = forward(pair, model)
    disp_b, occ_b, _ = forward(pair, model)
    with ThreadPoolExecutor(max_workers=4) as pool:
        results = list(pool.map(lambda _: forward(pair, model), range(4)))
    elapsed = time.perf_counter() - start
    same = disp_a.values.tobytes() == disp_b.values.tobytes() and (
        occ_a.probs.tobytes() == occ_b.probs.tobytes()
    )
    for disp_t, occ_t, _ in results:
        same = same and disp_t.values.tobytes() == disp_a.values.tobytes()
        same = same and occ_t.probs.tobytes() == occ_a.probs.tobytes()
    finite = np.isfinite(disp_a.values).all() and disp_a.values.max() < 32
    return bool(same and finite and elapsed < 10.0), (
        f"6 runs bit-identical, {elapsed:.2f}s"
    )


CHECKS = [
    ("softmax_normalization", check_softmax_normalization),
    ("axial_width_dense_oracle", check_axial_width_dense_oracle),
    ("axial_height_dense_oracle", check_axial_height_dense_oracle),
    ("cross_attention_dense_oracle", check_cross_attention_dense_oracle),
    ("position_encoding_structure", check_position_encoding_structure),
    ("sinkhorn_row_marginals", check_sinkhorn_row_marginals),
    ("sinkhorn_masked_cells", check_sinkhorn_masked_cells),
    ("sinkhorn_reference_agreement", check_sinkhorn_reference_agreement),
    ("disparity_regression_oracle", check_disparity_regression_oracle),
    ("gradcheck_relative_response", check_gradcheck_relative_response),
    ("gradcheck_smooth_l1", check_gradcheck_smooth_l1),
    ("gradcheck_binary_entropy", check_gradcheck_binary_entropy),
    ("cep_payload_schedule", check_cep_payload_schedule),
    ("epipolar_mask_convention", check_epipolar_mask_convention),
    ("metric_identities", check_metric_identities),
    ("loss_composition", check_loss_composition),
    ("config_defaults", check_config_defaults),
    ("format_roundtrips", check_format_roundtrips),
    ("forward_determinism", check_forward_determinism),
]


class corrupted_softmax:
    """Test hook: make softmax_axis mis-normalize while the context is held."""

    def __enter__(self):
        self._orig = nd.softmax_axis

        def broken(t, axis):
            return self._orig(t, axis) + np.float32(0.01)

        nd.softmax_axis = broken
        return self

    def __exit__(self, *exc):
        nd.softmax_axis = self._orig
        return False


def run_all(corrupt: str | None = None, out=None):
    """Run every check, print one line per check, return the results list."""
    if corrupt not in (None, "", "softmax"):
        raise ValueError(f"unknown corruption hook {corrupt!r}")
    results = []
    hook = corrupted_softmax() if corrupt == "softmax" else None
    if hook:
        hook.__enter__()
    try:
        for name, fn in CHECKS:
            try:
                passed, detail = fn()
            except Exception as exc:  # a crashed check is a failed check
                passed, detail = False, f"raised {type(exc).__name__}: {exc}"
            results.append((name, bool(passed), detail))
            if out is not None:
                status = "PASS" if passed else "FAIL"
                print(f"{name}: {status} ({detail})", file=out)
    finally:
        if hook:
            hook.__exit__(None, None, None)
    return results
