"""Asynchronous overlapping iteration.

Two runtimes share the block update of the synchronous scheme:

* ``async_solve_sim`` replays a delay schedule on a single logical clock and
  is fully deterministic for a fixed seed;
* ``async_solve_threaded`` runs one thread per block communicating only
  through a ``PublicBoard`` with exclusive-write / shared-read locking.
"""

from __future__ import annotations

import json
import threading
import time
from collections import deque
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, ScheduleExhaustedError
from .sync import (IterationState, SubproblemBackend, _DivergenceMonitor, build_solvers)


@dataclass
class DelaySchedule:
    """Which blocks update at each step and how stale their reads are.

    ``kind`` is ``"zero"`` (synchronous), ``"bounded_random"`` (reads at
    most ``max_delay`` steps old; each block updates with probability
    ``update_prob`` but never skips more than ``max_delay`` steps in a row) or
    ``"trace"`` (replay of ``steps``, e.g. loaded with ``from_file``).
    """

    kind: str = "zero"
    max_delay: int = 3
    seed: int = 0
    update_prob: float = 1.0
    steps: list | None = None

    def __post_init__(self):
        if self.kind not in ("zero", "bounded_random", "trace"):
            raise InputError(f"unknown schedule kind {self.kind!r}")
        if self.max_delay < 0:
            raise InputError("max_delay must be nonnegative")
        if not 0 < self.update_prob <= 1:
            raise InputError("update_prob must be in (0, 1]")
        if self.kind == "trace" and self.steps is None:
            raise InputError("trace schedules need steps")

    @classmethod
    def from_file(cls, path):
        with open(path) as fh:
            data = json.load(fh)
        return cls.from_json(data)

    @classmethod
    def from_json(cls, data):
        steps = [[(int(k), [int(t) for t in taus]) for k, taus in step] for step in data["steps"]]
        window = 0
        for t, step in enumerate(steps):
            for _, taus in step:
                if any(tau < 0 or tau > t for tau in taus):
                    raise InputError(f"step {t}: delays must satisfy 0 <= tau <= t")
                window = max(window, t - min(taus))
        return cls("trace", max_delay=window, steps=steps)

    def window(self):
        return 0 if self.kind == "zero" else self.max_delay

    def events(self, K):
        """Yield, for ``t = 0, 1, ...``, a list of ``(k, taus)`` for the blocks updating at ``t``."""
        if self.kind == "zero":
            while True:
                yield None
        elif self.kind == "trace":
            yield from self.steps
            raise ScheduleExhaustedError(f"delay trace exhausted after {len(self.steps)} steps")
        else:
            rng = np.random.default_rng(self.seed)
            D = self.max_delay
            idle = np.zeros(K, dtype=int)
            t = 0
            while True:
                step = []
                for k in range(K):
                    if self.update_prob < 1 and idle[k] < D and rng.random() >= self.update_prob:
                        idle[k] += 1
                        continue
                    idle[k] = 0
                    taus = rng.integers(max(0, t - D), t + 1, size=K)
                    taus[k] = t
                    step.append((k, taus.tolist()))
                yield step
                t += 1

    def record(self, K, n_steps):
        """Materialize ``n_steps`` steps as a JSON-serializable trace."""
        gen = self.events(K)
        steps = []
        for t in range(n_steps):
            ev = next(gen)
            if ev is None:
                ev = [(k, [t] * K) for k in range(K)]
            steps.append([[k, list(taus)] for k, taus in ev])
        return {"K": K, "steps": steps}


def async_solve_sim(h, f, blocks, backend: SubproblemBackend = None,
                    schedule: DelaySchedule = None, tol=1e-8, max_iter=10_000, x0=None,
                    x_star=None, keep_iterates=False, solvers=None) -> IterationState:
    """Deterministic simulation of the asynchronous scheme.

    At step ``t`` every block scheduled to update reads block ``k'`` as it was
    at step ``tau_{k,k'}(t)`` and solves its expanded subproblem; all other
    blocks carry over. With a zero-delay schedule this is the synchronous
    iteration, bit for bit.
    """
    schedule = schedule or DelaySchedule()
    f = np.asarray(f, dtype=float)
    n = h.n
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    if solvers is None:
        solvers = build_solvers(h, f, blocks, backend)
    K = len(solvers)
    interiors = [s.sub.interior for s in solvers]
    history = deque([x], maxlen=schedule.window() + 1)

    state = IterationState(x=x, iterates=[x.copy()] if keep_iterates else None,
                           errors=[] if x_star is not None else None)
    state.info.update(mode="async-sim", blocks=K, omega=blocks.omega, schedule=schedule.kind,
                      max_delay=schedule.window())
    update_log = []
    res = max(s.local_residual(x) for s in solvers)
    state.residual = state.initial_residual = res
    if x_star is not None:
        state.errors.append(float(np.abs(x - x_star).max()))
    monitor = _DivergenceMonitor(window=schedule.window())
    monitor.check(res, state)
    events = schedule.events(K)
    start = time.perf_counter()
    max_staleness = 0
    while res > tol and state.t < max_iter:
        t = state.t
        step = next(events)
        x_new = x.copy()
        if step is None:
            for s in solvers:
                x_new[s.sub.interior] = s.update(x)
            update_log.extend((t, k, t) for k in range(K))
        else:
            for k, taus in step:
                stale = x.copy()
                for kp in range(K):
                    tau = taus[kp]
                    if kp == k or tau == t:
                        continue
                    age = t - tau
                    if age >= len(history):
                        raise InputError(f"delay {age} exceeds the schedule window")
                    max_staleness = max(max_staleness, age)
                    stale[interiors[kp]] = history[-1 - age][interiors[kp]]
                x_new[interiors[k]] = solvers[k].update(stale)
                others = [taus[kp] for kp in range(K) if kp != k]
                update_log.append((t, k, min(others) if others else t))
        x = x_new
        history.append(x)
        state.t += 1
        res = max(s.local_residual(x) for s in solvers)
        state.x, state.residual = x, res
        if keep_iterates:
            state.iterates.append(x.copy())
        if x_star is not None:
            state.errors.append(float(np.abs(x - x_star).max()))
        state.trace.append((state.t, time.perf_counter() - start, res))
        monitor.check(res, state)
    state.converged = res <= tol
    state.info["update_log"] = update_log
    state.info["max_staleness"] = max_staleness
    state.info["time_s"] = time.perf_counter() - start
    return state


def epoch_index(update_log, K, n_steps):
    """Epoch count ``l(t)`` for ``t = 0..n_steps``.

    Epoch ``l+1`` starts once every block has performed an update whose reads
    are all at least as new as the start of epoch ``l`` and no later update
    reads older data. After ``l`` epochs the error is at most
    ``||S||_inf ** l`` times the initial error whenever ``||S||_inf < 1``.
    """
    log = sorted(update_log)
    starts = [0]
    while True:
        T = starts[-1]
        stale = [s for s, _, m in log if m < T]
        a = max(T, max(stale) + 1 if stale else T)
        first = {}
        for s, k, _ in log:
            if s >= a and k not in first:
                first[k] = s
        if len(first) < K:
            break
        nxt = max(first.values()) + 1
        if nxt > n_steps:
            break
        starts.append(nxt)
    ell = np.zeros(n_steps + 1, dtype=int)
    for e, T in enumerate(starts):
        ell[T:] = e
    return ell


class RWLock:
    """Many concurrent readers or one writer."""

    def __init__(self):
        self._cond = threading.Condition()
        self._readers = 0
        self._writer = False

    @contextmanager
    def shared(self):
        with self._cond:
            while self._writer:
                self._cond.wait()
            self._readers += 1
        try:
            yield
        finally:
            with self._cond:
                self._readers -= 1
                if self._readers == 0:
                    self._cond.notify_all()

    @contextmanager
    def exclusive(self):
        with self._cond:
            while self._writer or self._readers:
                self._cond.wait()
            self._writer = True
        try:
            yield
        finally:
            with self._cond:
                self._writer = False
                self._cond.notify_all()


class PublicBoard:
    """Published block solutions and local errors, one locked slot per block."""

    def __init__(self, initial_blocks):
        K = len(initial_blocks)
        self._locks = [RWLock() for _ in range(K)]
        self._x = [np.array(b, dtype=float) for b in initial_blocks]
        self._eps = [float("inf")] * K
        self._version = [0] * K

    def __len__(self):
        return len(self._x)

    def put(self, k, x_k, eps_k):
        snapshot = np.array(x_k, dtype=float)
        with self._locks[k].exclusive():
            self._x[k] = snapshot
            self._eps[k] = float(eps_k)
            self._version[k] += 1

    def get(self, k):
        """``(x_k, eps_k, version)``; the array is never mutated after publication."""
        with self._locks[k].shared():
            return self._x[k], self._eps[k], self._version[k]


@dataclass
class _WorkerLog:
    rows: list = field(default_factory=list)


def async_solve_threaded(h, f, blocks, backend: SubproblemBackend = None, tol=1e-8,
                         wall_limit_s=60.0, x0=None, solvers=None, monitor_interval=None,
                         synchronous=False) -> IterationState:
    """One thread per block, exchanging data only through a ``PublicBoard``.

    Each worker loops: publish its block and error, read every peer, compute
    its local error on the assembled vector and update its block. Once some
    worker sees every published error within ``tol`` it raises a shared stop
    flag and all workers finish. ``synchronous=True`` adds the two barriers
    of the synchronous variant. The final residual is recomputed
    exactly from the published blocks.
    """
    f = np.asarray(f, dtype=float)
    n = h.n
    x_init = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    if solvers is None:
        solvers = build_solvers(h, f, blocks, backend)
    K = len(solvers)
    interiors = [s.sub.interior for s in solvers]
    board = PublicBoard([x_init[i] for i in interiors])
    barrier = threading.Barrier(K) if synchronous else None
    timed_out = threading.Event()
    done = threading.Event()
    logs = [_WorkerLog() for _ in range(K)]
    start = time.perf_counter()
    deadline = start + wall_limit_s

    def worker(k):
        solver = solvers[k]
        x_local = x_init.copy()
        eps_k = float("inf")
        eps_seen = [float("inf")] * K
        it = 0
        while True:
            if time.perf_counter() > deadline:
                timed_out.set()
            if barrier is not None:
                _wait(barrier)
            board.put(k, x_local[interiors[k]], eps_k)
            if barrier is not None:
                _wait(barrier)
            for kp in range(K):
                if kp != k:
                    xk, ek, _ = board.get(kp)
                    x_local[interiors[kp]] = xk
                    eps_seen[kp] = ek
            # decide on published errors only, so every worker sees the same evidence
            eps_seen[k] = eps_k
            if max(eps_seen) <= tol:
                done.set()
            if done.is_set() or timed_out.is_set():
                if barrier is not None:
                    barrier.abort()
                return
            eps_k = eps_seen[k] = solver.local_residual(x_local)
            x_local[interiors[k]] = solver.update(x_local)
            it += 1
            logs[k].rows.append((time.perf_counter() - start, max(eps_seen), k, it))

    def _wait(b):
        try:
            b.wait()
        except threading.BrokenBarrierError:
            pass

    samples = []
    stop_monitor = threading.Event()

    def monitor():
        while not stop_monitor.is_set():
            x = np.empty(n)
            for kp in range(K):
                x[interiors[kp]] = board.get(kp)[0]
            r = max(s.local_residual(x) for s in solvers)
            samples.append((time.perf_counter() - start, r))
            stop_monitor.wait(monitor_interval)

    threads = [threading.Thread(target=worker, args=(k,), daemon=True) for k in range(K)]
    mon = threading.Thread(target=monitor, daemon=True) if monitor_interval else None
    for th in threads:
        th.start()
    if mon is not None:
        mon.start()
    for th in threads:
        th.join()
    stop_monitor.set()
    if mon is not None:
        mon.join()
    elapsed = time.perf_counter() - start

    x = np.empty(n)
    for kp in range(K):
        x[interiors[kp]] = board.get(kp)[0]
    res = max(s.local_residual(x) for s in solvers)
    rows = sorted(r for log in logs for r in log.rows)
    state = IterationState(x=x, t=len(rows), residual=res,
                           initial_residual=max(s.local_residual(x_init) for s in solvers))
    state.trace = [(i + 1, tm, eps, wk, li) for i, (tm, eps, wk, li) in enumerate(rows)]
    state.converged = not timed_out.is_set()
    state.info.update(mode="async-threaded" if not synchronous else "sync-threaded", blocks=K,
                      omega=blocks.omega, time_s=elapsed, timed_out=timed_out.is_set(),
                      local_iterations=[len(log.rows) for log in logs],
                      residual_slack=res / tol - 1.0 if res > tol else 0.0,
                      monitor=samples)
    return state
