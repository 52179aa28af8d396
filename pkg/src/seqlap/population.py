"""Populations of parallel SIG runs scored by their predictive errors.

Every run is scored by a weighted sum of squared point-prediction errors at
lags 0..L, accumulated since the last resampling time. At each resampling
time the pool is resampled with probabilities proportional to exp(-score)
(SIG-RS); SIG-RSRP additionally inflates the prior variance of overconfident
runs back to preset thresholds.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from .gaussmix import GaussianComponent, GaussianMixture
from .seqfilter import CorrectionConfig, FilterError, init_filter, step

POOL_ALGOS = ("sig", "sig-rs", "sig-rsrp")


class PopulationError(RuntimeError):
    pass


def default_schedule(last=2000):
    """10, 25, 50, 75, 100, then every 100 up to ``last``."""
    head = [r for r in (10, 25, 50, 75) if r < last]
    return tuple(head + list(range(100, last + 1, 100)))


@dataclass
class PoolConfig:
    """Pool size, resampling schedule, score lags and tempering thresholds.

    ``omega`` holds the lag weights (omega_0, ..., omega_L); each is divided
    by the observation variance estimate to form the score weights.
    """

    n_runs: int = 10
    resample_times: tuple = field(default_factory=default_schedule)
    L: int = 1
    omega: tuple = (0.2, 0.8)
    temper: bool = False
    threshold_variances: tuple | None = None
    sigma_warmup: int = 50
    filter_cfg: CorrectionConfig = field(default_factory=lambda: CorrectionConfig(algo="sig"))

    def __post_init__(self):
        self.resample_times = tuple(int(r) for r in self.resample_times)
        if self.n_runs < 1:
            raise ValueError("n_runs must be >= 1")
        if any(r < 1 for r in self.resample_times) or any(
                b <= a for a, b in zip(self.resample_times, self.resample_times[1:])):
            raise ValueError("resample_times must be strictly increasing positive integers")
        if self.L < 0 or len(self.omega) != self.L + 1:
            raise ValueError(f"omega needs L + 1 = {self.L + 1} entries")
        if any(w < 0 for w in self.omega):
            raise ValueError("omega must be non-negative")
        if self.temper:
            if self.threshold_variances is None or not np.all(np.asarray(self.threshold_variances) > 0):
                raise ValueError("tempering needs positive threshold_variances")
        if self.filter_cfg.algo != "sig":
            raise ValueError("population runs use the SIG filter")

    def with_(self, **kw):
        return replace(self, **kw)


# -- scores ------------------------------------------------------------------------------

@dataclass
class ScoreState:
    """Squared prediction errors since the last reset, per lag and y coordinate.

    ``pred_buffer[s % (L+1), l]`` holds the prediction of y_{s+l} made at time
    s, valid when ``pred_time[s % (L+1)] == s``.
    """

    sse: np.ndarray
    pred_buffer: np.ndarray
    pred_time: np.ndarray
    sigma_hat: np.ndarray
    omega_l: np.ndarray
    last_reset: int = 0

    @classmethod
    def empty(cls, L, omega, d_y=1):
        return cls(np.zeros((L + 1, d_y)), np.full((L + 1, L + 1, d_y), np.nan),
                   np.full(L + 1, -1, dtype=int), np.ones(d_y), np.asarray(omega, dtype=float))

    @property
    def L(self):
        return self.sse.shape[0] - 1

    @property
    def total(self):
        w = self.omega_l[:, None] / self.sigma_hat[None, :] ** 2
        return float(np.sum(w * self.sse))

    def copy(self):
        return ScoreState(self.sse.copy(), self.pred_buffer.copy(), self.pred_time.copy(),
                          self.sigma_hat.copy(), self.omega_l, self.last_reset)

    def record(self, s, preds):
        """Store predictions made at time s; ``preds[l]`` targets y_{s+l} (NaN if beyond the data)."""
        out = self.copy()
        slot = s % (self.L + 1)
        out.pred_buffer[slot] = np.asarray(preds, dtype=float).reshape(self.L + 1, -1)
        out.pred_time[slot] = s
        return out

    def reset(self, t):
        out = self.copy()
        out.sse[:] = 0.0
        out.last_reset = t
        return out


def point_predict(state, model, z, l=0):
    """Prediction of y at lag ``l`` from the mean of ``state.mix``, propagated noise-free.

    ``z`` is the covariate at the target time.
    """
    if l < 0:
        raise ValueError("lag must be >= 0")
    mean = state.mix.mean()
    x, phi = mean[: model.d_x], mean[model.d_x:][None, :]
    if l > 0:
        A = model.transition(phi)[0]
        for _ in range(l):
            x = A @ x
    return float(model.obs_mean(x[None, :], phi, z)[0])


def update_score(score, y_t, t, sigma_hat=None):
    """Add the squared errors of every buffered prediction of y_t; lags without one are skipped."""
    out = score.copy()
    if sigma_hat is not None:
        out.sigma_hat = np.asarray(sigma_hat, dtype=float).reshape(-1)
    y_t = np.atleast_1d(np.asarray(y_t, dtype=float))
    n_slots = score.L + 1
    for l in range(n_slots):
        s = t - l
        slot = s % n_slots
        if s >= 1 and out.pred_time[slot] == s:
            e = y_t - out.pred_buffer[slot, l]
            out.sse[l] += e * e
    return out


def batch_score(preds, y, omega, sigma_hat, t0, t1):
    """Recompute SSE (L+1, d_y) over times t0..t1 from stored predictions.

    ``preds[s - 1, l]`` is the prediction of y_{s+l} made at time s (1-based s).
    """
    preds = np.asarray(preds, dtype=float)
    y = np.asarray(y, dtype=float).reshape(len(y), -1)
    L = preds.shape[1] - 1
    sse = np.zeros((L + 1, y.shape[1]))
    for l in range(L + 1):
        for t in range(max(t0, 1 + l), t1 + 1):
            e = y[t - 1] - preds[t - l - 1, l]
            sse[l] += e * e
    w = np.asarray(omega, dtype=float)[:, None] / np.asarray(sigma_hat, dtype=float).reshape(1, -1) ** 2
    return sse, float(np.sum(w * sse))


class ScaleEstimate:
    """Per-coordinate observation scale: std of the first ``warmup`` values, running before that."""

    def __init__(self, warmup=50):
        self.warmup = int(warmup)
        self._seen = []
        self._fixed = None

    def update(self, y_t):
        if self._fixed is None:
            self._seen.append(np.atleast_1d(np.asarray(y_t, dtype=float)))
            if len(self._seen) >= self.warmup:
                self._fixed = self._current()
        return self.value

    def _current(self):
        if len(self._seen) < 2:
            return np.ones_like(self._seen[0])
        sd = np.std(np.array(self._seen), axis=0, ddof=1)
        return np.where(sd > 0, sd, 1.0)

    @property
    def value(self):
        return self._fixed if self._fixed is not None else self._current()


# -- resampling and tempering ----------------------------------------------------------------

def resample_probabilities(scores):
    """exp(-score) normalized after subtracting the smallest finite score."""
    s = np.asarray(scores, dtype=float)
    ok = np.isfinite(s)
    if not np.any(ok):
        raise PopulationError("no run has a finite score")
    p = np.zeros_like(s)
    p[ok] = np.exp(-(s[ok] - np.min(s[ok])))
    return p / np.sum(p)


@dataclass(frozen=True)
class ResampleEvent:
    t: int
    probabilities: np.ndarray
    ancestors: np.ndarray


@dataclass
class RunPool:
    """Runs in lockstep; ``states[i]`` is None once run i has failed."""

    states: list
    scores: list
    t: int
    spawner: np.random.SeedSequence
    rng: np.random.Generator
    events: list = field(default_factory=list)
    failures: list = field(default_factory=list)

    @property
    def n_runs(self):
        return len(self.states)

    def alive(self):
        return [i for i, s in enumerate(self.states) if s is not None]

    def score_vector(self):
        return np.array([sc.total if st is not None else np.inf
                         for st, sc in zip(self.states, self.scores)])


def resample_pool(pool):
    """Multinomial resampling of the runs by exp(-score); SSE reset, ancestry logged.

    The first copy of each ancestor keeps its random stream; further copies
    get fresh streams so that clones diverge.
    """
    p = resample_probabilities(pool.score_vector())
    n = pool.n_runs
    anc = np.sort(pool.rng.choice(n, size=n, p=p))
    states, scores, used = [], [], set()
    for a in anc:
        st = pool.states[a]
        if a in used:
            st = replace(st, rng=np.random.default_rng(pool.spawner.spawn(1)[0]))
        used.add(a)
        states.append(st)
        scores.append(pool.scores[a].reset(pool.t))
    event = ResampleEvent(pool.t, p, anc)
    return replace(pool, states=states, scores=scores, events=pool.events + [event])


def temper_variances(state, thresholds):
    """Rescale a single-Gaussian state to the threshold variances if it is tighter everywhere.

    The congruence D S D with D = diag(sqrt(thr / var)) keeps the correlation
    matrix. Returns ``state`` itself when some variance already reaches its threshold.
    """
    if len(state.mix) != 1:
        raise ValueError("tempering needs a single-component approximation")
    comp = state.mix.components[0]
    cov = comp.covariance
    var = np.diag(cov)
    thr = np.asarray(thresholds, dtype=float)
    if thr.shape != var.shape:
        raise ValueError(f"need {var.shape[0]} threshold variances, got {thr.shape}")
    if not np.all(var < thr):
        return state
    D = np.sqrt(thr / var)
    new_cov = cov * np.outer(D, D)
    np.fill_diagonal(new_cov, thr)
    new = GaussianComponent.from_covariance(comp.mean, new_cov, comp.log_weight)
    return replace(state, mix=GaussianMixture([new]))


# -- driver -----------------------------------------------------------------------------------

def run_rngs(seed, n_runs):
    """(per-run generators, pool generator, spawner for clone streams) from one seed."""
    ss = np.random.SeedSequence(seed)
    kids = ss.spawn(n_runs + 2)
    return [np.random.default_rng(k) for k in kids[:n_runs]], np.random.default_rng(kids[n_runs]), kids[n_runs + 1]


@dataclass
class PoolTrace:
    """Per-run and pool-weighted marginal traces, shapes (N, n, d) and (n, d)."""

    algo: str
    coord_names: tuple
    means: np.ndarray
    stds: np.ndarray
    scores: np.ndarray
    ancestors: np.ndarray
    tempered: np.ndarray
    pool_mean: np.ndarray
    pool_std: np.ndarray
    pool_weights: np.ndarray
    events: list
    failures: list

    @property
    def final_estimate(self):
        return self.pool_mean[-1]

    def final_median(self):
        """Across-run median of the final marginal means (failed runs ignored)."""
        return np.nanmedian(self.means[:, -1, :], axis=0)


def _pool_summary(means, stds, w):
    m = np.einsum("n,nd->d", w, means)
    second = np.einsum("n,nd->d", w, stds ** 2 + means ** 2)
    return m, np.sqrt(np.maximum(second - m * m, 0.0))


def run_population(model, y, z=None, algo="sig-rs", cfg=None, seed=0):
    """Advance a pool of SIG runs over the whole series.

    ``algo`` is ``"sig"`` (independent runs), ``"sig-rs"`` (resampling) or
    ``"sig-rsrp"`` (resampling plus tempering). Failed runs are replaced by
    clones at the next resampling time; the pool summary weights runs by
    exp(-score) on the scores accumulated since the last resampling.
    """
    algo = algo.lower()
    if algo not in POOL_ALGOS:
        raise ValueError(f"algo must be one of {POOL_ALGOS}, got {algo!r}")
    cfg = cfg or PoolConfig()
    if algo == "sig-rsrp" and cfg.threshold_variances is None:
        raise ValueError("sig-rsrp needs threshold_variances")
    y = np.asarray(y, dtype=float)
    n = y.shape[0]
    if n == 0:
        raise ValueError("empty series")
    z = np.zeros(n) if z is None else np.asarray(z, dtype=float)
    N, L, d = cfg.n_runs, cfg.L, model.dim
    fcfg = cfg.filter_cfg
    times = set(cfg.resample_times) if algo != "sig" else set()
    temper = algo == "sig-rsrp"

    rngs, pool_rng, spawner = run_rngs(seed, N)
    scale = ScaleEstimate(cfg.sigma_warmup)
    pool = RunPool([None] * N, [ScoreState.empty(L, cfg.omega) for _ in range(N)], 0, spawner, pool_rng)
    alive = list(range(N))

    means = np.full((N, n, d), np.nan)
    stds = np.full((N, n, d), np.nan)
    scores = np.full((N, n), np.nan)
    ancestors = np.tile(np.arange(N), (n, 1)).T
    tempered = np.zeros((N, n), dtype=bool)
    pool_mean = np.full((n, d), np.nan)
    pool_std = np.full((n, d), np.nan)
    pool_w = np.full((n, N), np.nan)

    for t in range(1, n + 1):
        sig_hat = scale.update(y[t - 1])
        states = list(pool.states)
        for i in alive:
            try:
                states[i] = (init_filter(model, y[0], z[0], fcfg, rngs[i]) if t == 1
                             else step(states[i], model, y[t - 1], z[t - 1], fcfg))
            except FilterError as err:
                states[i] = None
                pool.failures.append((t, i, str(err)))
        pool = replace(pool, states=states, t=t)
        alive = pool.alive()
        if not alive:
            raise PopulationError(f"all runs failed by t={t}")
        assert all(pool.states[i].t == t for i in alive)

        new_scores = list(pool.scores)
        for i in alive:
            st = pool.states[i]
            preds = [point_predict(st, model, z[t - 1 + l], l) if t + l <= n else np.nan
                     for l in range(L + 1)]
            sc = pool.scores[i].record(t, preds)
            new_scores[i] = update_score(sc, y[t - 1], t, sig_hat)
        pool = replace(pool, scores=new_scores)

        svec = pool.score_vector()
        w = resample_probabilities(svec)
        for i in alive:
            means[i, t - 1], stds[i, t - 1] = pool.states[i].mix.marginal_moments()
        scores[:, t - 1] = np.where(np.isfinite(svec), svec, np.nan)
        pool_w[t - 1] = w
        live = w > 0
        pool_mean[t - 1], pool_std[t - 1] = _pool_summary(means[live, t - 1], stds[live, t - 1], w[live])

        if t in times:
            pool = resample_pool(pool)
            ancestors[:, t - 1] = pool.events[-1].ancestors
            if temper:
                thr = cfg.threshold_variances
                states = []
                for i, st in enumerate(pool.states):
                    new = temper_variances(st, thr)
                    tempered[i, t - 1] = new is not st
                    states.append(new)
                pool = replace(pool, states=states)
            alive = pool.alive()

    return PoolTrace(algo, model.coord_names, means, stds, scores, ancestors, tempered,
                     pool_mean, pool_std, pool_w, pool.events, pool.failures)


def genealogy(events, n_runs, t_end=None):
    """Replay resampling events: founder index of every final run."""
    founder = np.arange(n_runs)
    for ev in events:
        if t_end is not None and ev.t > t_end:
            break
        founder = founder[ev.ancestors]
    return founder
