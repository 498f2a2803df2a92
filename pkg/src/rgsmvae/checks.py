"""Self-verification suites run by ``rgsmvae check``.

Each suite returns a :class:`SuiteResult`.  The suites compare the
implementation against independent oracles (brute-force minimizers, central
differences, Monte-Carlo estimates, plain numpy formulas), so a deliberately
injected bug, see :data:`MUTATIONS`, must make at least one of them fail.
"""

from __future__ import annotations

import contextlib
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import model as M
from . import rgsm
from . import tensor as T
from .layers import LSTM, Conv1dStack, Linear, ModelParams, MultiHeadSelfAttention, PostNet
from .tensor import Tensor


@dataclass
class SuiteResult:
    suite: str
    passed: bool
    cases: int
    max_error: float
    tolerance: float
    seconds: float = 0.0
    failures: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["failures"] = d["failures"][:10]
        return d


# --- prox -----------------------------------------------------------------------

def _prox_objective(z, w, lam, kind):
    d = 0.5 * float(np.sum((z - w) ** 2))
    n = float(np.linalg.norm(z))
    return d + (lam * (n > 0) if kind == "gl0" else lam * n)


def brute_force_prox_value(w, lam, kind, grid=4001):
    """Smallest proximal objective over a radial grid plus analytic candidates.

    Along any direction other than ``w`` the distance term only grows, so
    the minimizer is ``t * w / ||w||`` for some ``t >= 0``.
    """
    w = np.asarray(w, dtype=np.float64)
    norm = float(np.linalg.norm(w))
    if norm == 0:
        return 0.0
    ts = np.concatenate([np.linspace(0.0, 2.0 * norm + lam, grid), [0.0, norm, max(norm - lam, 0.0)]])
    penalty = lam * (ts > 0) if kind == "gl0" else lam * ts
    # evaluate at the actual points so the oracle shares no algebra with the prox
    pts = ts[:, None] * (w / norm)[None, :]
    values = 0.5 * ((pts - w) ** 2).sum(axis=1) + penalty
    return float(values.min())


def check_prox(n_cases=200, seed=0, tol=1e-9) -> SuiteResult:
    rng = np.random.default_rng(seed)
    worst, failures = 0.0, []
    for case in range(n_cases):
        dim = int(rng.integers(1, 9))
        lam = float(rng.uniform(0.01, 2.0))
        w = rng.standard_normal(dim) * rng.uniform(0.1, 2.5)
        for kind, prox in (("gl0", rgsm.prox_gl0), ("gl", rgsm.prox_gl)):
            got = _prox_objective(prox(w, lam), w, lam, kind)
            best = brute_force_prox_value(w, lam, kind)
            gap = got - best
            worst = max(worst, gap)
            if gap > tol:
                failures.append({"case": case, "kind": kind, "dim": dim, "lambda": lam,
                                 "norm": float(np.linalg.norm(w)), "gap": gap})
    return SuiteResult("prox", not failures, 2 * n_cases, worst, tol, failures=failures)


# --- gradients ------------------------------------------------------------------

def _weighted_sum(y: Tensor, rng) -> Tensor:
    # random weights stop symmetric terms from cancelling in the check
    return T.sum(T.mul(y, Tensor(rng.standard_normal(y.shape))))


def _key_bias_gradient(seed) -> float:
    rng = np.random.default_rng(seed)
    with T.precision(np.float64):
        p = ModelParams()
        attn = MultiHeadSelfAttention(p, "attn", 2, 3, rng)
        attn.k.bias.data = rng.standard_normal(6)
        x = Tensor(rng.standard_normal((4, 2, 6)))
        w = Tensor(rng.standard_normal((4, 2, 6)))
        grads = T.backward(T.sum(T.mul(attn(x), w)))
    g = grads.get(attn.k.bias)
    return 0.0 if g is None else float(np.max(np.abs(g)))


def _layer_cases(seed):
    rng = np.random.default_rng(seed)
    cases = []

    def case(name, build, x_shape):
        p = ModelParams()
        layer = build(p)
        x = Tensor(rng.standard_normal(x_shape), requires_grad=True, name="x")
        out_rng_seed = int(rng.integers(1 << 31))

        def f(_):
            y = layer(x)
            if isinstance(y, tuple):
                y = y[0]
            return _weighted_sum(y, np.random.default_rng(out_rng_seed))

        cases.append((name, f, p.tensors() + [x]))

    lrng = np.random.default_rng(seed + 1)
    case("fc", lambda p: Linear(p, "fc", 5, 4, lrng), (3, 5))
    case("conv1d-stack", lambda p: Conv1dStack(p, "conv", [3, 4, 2], lrng, kernel=3, padding=1), (2, 3, 7))
    case("lstm", lambda p: LSTM(p, "lstm", 3, 4, 2, lrng), (5, 2, 3))
    case("bilstm", lambda p: LSTM(p, "bilstm", 3, 4, 2, lrng, bidirectional=True), (5, 2, 3))
    case("mhsa", lambda p: MultiHeadSelfAttention(p, "attn", 2, 3, lrng), (4, 2, 6))
    case("postnet", lambda p: PostNet(p, "post", 4, 5, lrng, depth=3, kernel=3), (2, 4, 6))
    return cases


def _op_cases(seed):
    rng = np.random.default_rng(seed)

    def r(*shape, positive=False):
        a = rng.standard_normal(shape)
        return Tensor(np.abs(a) + 0.5 if positive else a, requires_grad=True)

    a, b = r(3, 4), r(3, 4)
    m1, m2 = r(2, 3, 4), r(2, 4, 5)
    bias = r(4)
    pos = r(3, 4, positive=True)
    x, w, cb = r(2, 3, 6), r(4, 3, 3), r(4)
    # keep relu / l1 inputs away from their kinks
    away = Tensor(np.sign(a.data) * (np.abs(a.data) + 0.3), requires_grad=True)
    ops = {
        "matmul": (lambda: T.matmul(m1, m2), [m1, m2]),
        "add": (lambda: T.add(a, bias), [a, bias]),
        "sub": (lambda: T.sub(a, b), [a, b]),
        "elementwise-mul": (lambda: T.mul(a, b), [a, b]),
        "tanh": (lambda: T.tanh(a), [a]),
        "sigmoid": (lambda: T.sigmoid(a), [a]),
        "relu": (lambda: T.relu(away), [away]),
        "exp": (lambda: T.exp(a), [a]),
        "log": (lambda: T.log(pos), [pos]),
        "softmax-over-last-axis": (lambda: T.softmax(a), [a]),
        "concat": (lambda: T.concat([a, b], axis=0), [a, b]),
        "slice": (lambda: T.slice_axis(a, 1, 1, 3), [a]),
        "reshape": (lambda: T.reshape(a, (2, 6)), [a]),
        "transpose": (lambda: T.transpose(m1, (2, 0, 1)), [m1]),
        "mean": (lambda: T.mean(a, axis=0), [a]),
        "sum": (lambda: T.sum(a, axis=1), [a]),
        "conv1d": (lambda: T.conv1d(x, w, cb, stride=1, padding=1), [x, w, cb]),
        "squared-l2": (lambda: T.squared_l2(a), [a]),
        "l1-norm": (lambda: T.l1_norm(away), [away]),
    }
    cases = []
    for kind, (fn, inputs) in ops.items():
        out_seed = int(rng.integers(1 << 31))
        cases.append((kind, lambda _, fn=fn, s=out_seed: _weighted_sum(fn(), np.random.default_rng(s)), inputs))
    return cases


def _model_case(seed, divisor=8, frames=8):
    from .corpus import CorpusSpec, by_speaker, generate

    cfg = M.ModelConfig.scaled(divisor, frames=frames)
    model = M.VoiceVAE(cfg, seed=seed)
    train, _ = generate(CorpusSpec(seed=seed, n_speakers_train=2, n_speakers_heldout=0,
                                   utterances_per_speaker=2, frames=frames))
    groups = list(by_speaker(train).values())

    def f(_):
        total, _, _ = M.forward_groups(model, groups, np.random.default_rng(seed))
        return total

    return f, model.params.tensors()


def check_gradients(seed=0, tol=1e-4, include_model=True, model_coords=2) -> SuiteResult:
    worst, failures, cases = 0.0, [], 0
    for name, f, params in _op_cases(seed) + _layer_cases(seed):
        if name == "mhsa":
            params = [t for t in params if not t.name.endswith(".k.bias")]
        err = T.grad_check(f, params, max_coords=12, seed=seed)
        cases += 1
        worst = max(worst, err)
        if not err < tol:
            failures.append({"case": name, "rel_error": err})
    # softmax ignores a constant shift of the scores, so the key bias has an
    # identically zero gradient; relative error is meaningless there
    err = _key_bias_gradient(seed)
    cases += 1
    if not err < 1e-9:
        failures.append({"case": "mhsa:key-bias", "abs_error": err})
    if include_model:
        f, params = _model_case(seed)
        for t in params:
            err = T.grad_check(f, [t], max_coords=model_coords, seed=seed)
            cases += 1
            worst = max(worst, err)
            if not err < tol:
                failures.append({"case": f"model:{t.name}", "rel_error": err})
    return SuiteResult("gradient", not failures, cases, worst, tol, failures=failures)


# --- KL -------------------------------------------------------------------------

def monte_carlo_kl(mean, log_var, n=100_000, rng=None):
    """Sample estimate of KL(q || N(0, I)) and its standard error."""
    rng = rng or np.random.default_rng(0)
    mean = np.asarray(mean, dtype=np.float64)
    log_var = np.asarray(log_var, dtype=np.float64)
    z = mean + np.exp(0.5 * log_var) * rng.standard_normal((n, mean.size))
    log_q = -0.5 * (((z - mean) ** 2) / np.exp(log_var) + log_var).sum(axis=1)
    log_p = -0.5 * (z ** 2).sum(axis=1)
    diff = log_q - log_p
    return float(diff.mean()), float(diff.std(ddof=1) / math.sqrt(n))


def check_kl(n_cases=20, n_samples=100_000, seed=0, sigmas=3.0) -> SuiteResult:
    rng = np.random.default_rng(seed)
    worst, failures = 0.0, []
    for case in range(n_cases):
        dim = int(rng.integers(1, 9))
        mean = rng.normal(0.0, 1.0, dim)
        log_var = rng.uniform(-1.5, 1.0, dim)
        with T.precision(np.float64), T.no_grad():
            closed = M.kl_diag_gaussian(M.GaussianDiag(Tensor(mean), Tensor(log_var))).item()
        est, se = monte_carlo_kl(mean, log_var, n_samples, rng)
        z = abs(closed - est) / se
        worst = max(worst, z)
        if z > sigmas:
            failures.append({"case": case, "closed_form": closed, "monte_carlo": est, "std_error": se})
    return SuiteResult("kl", not failures, n_cases, worst, sigmas, failures=failures)


# --- pooling --------------------------------------------------------------------

def check_pool(n_cases=50, seed=0, tol=1e-9) -> SuiteResult:
    """Pooled mean must be the arithmetic mean, pooled sigma the geometric mean."""
    rng = np.random.default_rng(seed)
    worst, failures = 0.0, []
    for case in range(n_cases):
        n, dim = int(rng.integers(2, 7)), int(rng.integers(1, 6))
        means = rng.normal(0.0, 1.0, (n, dim))
        log_vars = rng.uniform(-3.0, 2.0, (n, dim))
        with T.precision(np.float64), T.no_grad():
            pooled = M.group_pool_speaker([M.GaussianDiag(Tensor(m), Tensor(lv)) for m, lv in zip(means, log_vars)])
            got_mean, got_sigma = pooled.mean.data, pooled.sigma.data
        sigma = np.exp(0.5 * log_vars)
        want_sigma = np.prod(sigma, axis=0) ** (1.0 / n)
        err = max(float(np.max(np.abs(got_mean - means.mean(axis=0)))),
                  float(np.max(np.abs(got_sigma - want_sigma) / want_sigma)))
        worst = max(worst, err)
        if err > tol:
            failures.append({"case": case, "group": n, "dim": dim, "error": err})
    return SuiteResult("pool", not failures, n_cases, worst, tol, failures=failures)


# --- RGSM -----------------------------------------------------------------------

def check_rgsm(steps=100, seed=0) -> SuiteResult:
    """With beta_split = lambda_l = 0 the update must equal plain gradient descent bit for bit."""
    rng = np.random.default_rng(seed)
    shapes = {"a": (6, 5), "b": (3, 4), "c": (7,)}
    targets = {k: rng.standard_normal(s).astype(np.float32) for k, s in shapes.items()}
    start = {k: rng.standard_normal(s).astype(np.float32) for k, s in shapes.items()}
    cfg = rgsm.RgsmConfig(alpha=0.05, beta_split=0.0, lambda_l=0.0, lam=0.3)
    w_rgsm = {k: v.copy() for k, v in start.items()}
    w_gd = {k: v.copy() for k, v in start.items()}
    state: dict = {}
    mismatches = []
    for step in range(steps):
        if step % 10 == 0:
            state = {k: rgsm.prox_columns(w_rgsm[k], cfg.lam, cfg.penalty) for k in ("a", "b")}
        grads = {k: (w_rgsm[k] - targets[k]) * np.float32(2.0) for k in shapes}
        w_rgsm = rgsm.rgsm_step(w_rgsm, grads, state, cfg, regularized={"a", "b"})
        w_gd = {k: w_gd[k] - cfg.alpha * ((w_gd[k] - targets[k]) * np.float32(2.0)) for k in shapes}
        for k in shapes:
            if not np.array_equal(w_rgsm[k], w_gd[k]):
                mismatches.append({"step": step, "param": k})
        if mismatches:
            break
    # hard thresholding is idempotent and leaves kept columns untouched
    W = rng.standard_normal((5, 9))
    once = rgsm.prox_columns(W, 0.4, "gl0")
    kept = np.any(once != 0, axis=0)
    if not np.array_equal(rgsm.prox_columns(once, 0.4, "gl0"), once) or not np.array_equal(once[:, kept], W[:, kept]):
        mismatches.append({"case": "gl0 idempotence"})
    return SuiteResult("rgsm", not mismatches, steps + 1, float(len(mismatches)), 0.0, failures=mismatches)


SUITES = {
    "prox": check_prox,
    "gradient": check_gradients,
    "kl": check_kl,
    "pool": check_pool,
    "rgsm": check_rgsm,
}


def run_suites(names=None) -> list:
    results = []
    for name in names or SUITES:
        t0 = time.perf_counter()
        res = SUITES[name]()
        res.seconds = time.perf_counter() - t0
        results.append(res)
    return results


# --- mutations ------------------------------------------------------------------

@contextlib.contextmanager
def _swap(obj, attr, value):
    old = getattr(obj, attr)
    setattr(obj, attr, value)
    try:
        yield
    finally:
        setattr(obj, attr, old)


@contextlib.contextmanager
def _prox_threshold_lambda():
    with _swap(rgsm, "_gl0_threshold", lambda lam: lam):
        yield


def _arithmetic_sigma_pool(log_vars):
    sigma_mean = T.mean(T.exp(T.scale(log_vars, 0.5)), axis=0)
    return T.scale(T.log(sigma_mean), 2.0)


@contextlib.contextmanager
def _pool_arithmetic_sigma():
    with _swap(M, "_pool_log_var", _arithmetic_sigma_pool):
        yield


@contextlib.contextmanager
def _lstm_backward_sign():
    # the gate nonlinearity's backward rule; every LSTM step goes through it
    rules = T.BACKWARD_RULES
    good = rules["sigmoid"]

    def flipped(grad, inputs, out, attrs, saved):
        return [-g for g in good(grad, inputs, out, attrs, saved)]

    rules["sigmoid"] = flipped
    try:
        yield
    finally:
        rules["sigmoid"] = good


MUTATIONS = {
    "prox-threshold": _prox_threshold_lambda,
    "pool-arithmetic-sigma": _pool_arithmetic_sigma,
    "lstm-backward-sign": _lstm_backward_sign,
}
