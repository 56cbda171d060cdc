"""Application models driven by the simulator.

Each model keeps its own progress bookkeeping and reacts to upcalls from the
event loop. The loop passes itself as ``ctx`` on every call; models read
the cluster through it and never keep it between calls.

Between events a model progresses at a constant rate. ``next_internal``
reports the next time the model itself needs attention: job completion,
a checkpoint starting or becoming durable, or a task finishing.
"""
from __future__ import annotations

import math
from collections import deque

from .scenario import ApplicationSpec

EPS = 1e-9
INF = math.inf

RUNNING, RECOVERING, WAITING, DONE = "running", "recovering", "waiting-for-price", "done"


def checkpoint_interval(delta: float, mttr: float) -> float:
    """Periodic checkpoint interval tau = sqrt(2 * delta * MTTR)."""
    return math.sqrt(2.0 * delta * mttr)


class AppModel:
    kind = ""

    def __init__(self, spec: ApplicationSpec, weights: dict, now: float):
        self.spec = spec
        self.id = spec.id
        self.base_weights = dict(weights)
        self.weights = dict(weights)
        self.arrival = now
        self.status = RUNNING
        self.rate = 0.0
        self.finished_at: float | None = None
        self.revocations = 0
        self.checkpoints_written = 0
        self.rollback_lost = 0.0
        self.checkpoint_log: list = []
        self.progress_log: list = []
        self.tau: float | None = None

    @property
    def baseline_time(self) -> float:
        return self.spec.work_seconds

    @property
    def done(self) -> bool:
        return self.status == DONE

    # hooks; the defaults ignore the upcall
    def compute_rate(self, ctx) -> float:
        return 0.0

    def advance(self, dt: float):
        pass

    def next_internal(self, now: float) -> float:
        return INF

    def on_internal(self, ctx):
        pass

    def on_hard_warning(self, ctx, market, revoke_at):
        pass

    def on_soft_warning(self, ctx, market):
        pass

    def on_revocation(self, ctx, market, fraction):
        pass

    def on_price_threshold(self, ctx, market, above):
        pass

    def on_ready(self, ctx):
        pass

    def on_mttr(self, ctx, mttr):
        pass

    def _finish(self, now):
        self.status = DONE
        self.finished_at = now
        self.rate = 0.0


class ProgressApp(AppModel):
    """Shared bookkeeping for models with one scalar progress counter."""

    def __init__(self, spec, weights, now):
        super().__init__(spec, weights, now)
        self.progress = 0.0
        self.checkpointed = 0.0
        self.write_started: float | None = None
        self.snapshot = 0.0
        self.next_checkpoint = INF
        self._anchor = now  # last checkpoint start or (re)start of work

    def _log(self, now):
        self.progress_log.append((now, self.progress))

    def advance(self, dt):
        if self.rate > 0 and dt > 0:
            self.progress = min(self.spec.work_seconds, self.progress + self.rate * dt)

    def on_mttr(self, ctx, mttr):
        if not self.spec.checkpointing:
            return
        first = self.tau is None
        self.tau = checkpoint_interval(self.spec.checkpoint_seconds, mttr)
        if first or self.next_checkpoint != INF:
            self.next_checkpoint = max(ctx.now, self._anchor + self.tau)

    def _remaining(self):
        return self.spec.work_seconds - self.progress

    def next_internal(self, now):
        t = INF
        if self.rate > 0:
            t = now + max(0.0, self._remaining()) / self.rate
        if self.write_started is not None:
            t = min(t, self.write_started + self.spec.checkpoint_seconds)
        if self.spec.checkpointing and self.status == RUNNING:
            t = min(t, self.next_checkpoint)
        return t

    def on_internal(self, ctx):
        now = ctx.now
        if self._remaining() <= EPS * max(1.0, self.spec.work_seconds):
            self.progress = self.spec.work_seconds
            self.write_started = None
            self._finish(now)
            return
        if self.write_started is not None and self.write_started + self.spec.checkpoint_seconds <= now + EPS:
            self.checkpointed = self.snapshot
            self.write_started = None
        if self.spec.checkpointing and self.next_checkpoint <= now + EPS:
            if self.status == RUNNING and self.rate > 0:
                self.write_started = now
                self.snapshot = self.progress
                self.checkpoints_written += 1
                self.checkpoint_log.append((now, self.progress))
                self._anchor = now
                self.next_checkpoint = now + self.tau
            else:
                self.next_checkpoint = INF

    def _rollback(self, now, to):
        lost = max(0.0, self.progress - to)
        self.rollback_lost += lost
        self.progress = to
        self.write_started = None  # an interrupted write never becomes durable
        self._log(now)
        return lost

    def _resume_checkpoints(self, now):
        if self.spec.checkpointing and self.tau is not None and self.next_checkpoint == INF:
            self._anchor = now
            self.next_checkpoint = now + self.tau


class BatchCheckpointApp(ProgressApp):
    """Data-parallel batch job that survives partial server loss.

    Losing a fraction ``f`` of its resources forfeits ``f`` of the work done
    since the last durable checkpoint. Recovery is ``eager`` (replace lost
    capacity now), ``none`` (run degraded; replace only when nothing is
    left) or ``progress-threshold`` (eager while progress is below ``p``).
    """

    kind = "batch-checkpoint"

    def compute_rate(self, ctx):
        if self.done:
            return 0.0
        return ctx.usable_fraction(self.id)

    def on_revocation(self, ctx, market, fraction):
        self.revocations += 1
        forfeit = fraction * (self.progress - self.checkpointed)
        self._rollback(ctx.now, self.progress - forfeit)
        policy = self.spec.recovery
        eager = policy == "eager" or (
            policy == "progress-threshold" and self.progress / self.spec.work_seconds < self.spec.progress_threshold
        )
        if eager or ctx.usable_fraction(self.id, include_pending=True) <= EPS:
            ctx.replenish(self.id)

    def on_ready(self, ctx):
        self._resume_checkpoints(ctx.now)


class RigidApp(ProgressApp):
    """Tightly coupled job: any revocation kills it.

    The job restarts from its last durable checkpoint (or from zero) once the
    cluster is back at full size; replacement is always immediate.
    """

    kind = "rigid"

    def __init__(self, spec, weights, now):
        super().__init__(spec, weights, now)
        self.kills = 0

    def compute_rate(self, ctx):
        if self.status != RUNNING:
            return 0.0
        return 1.0 if ctx.usable_fraction(self.id) >= 1.0 - 1e-9 else 0.0

    def on_revocation(self, ctx, market, fraction):
        self.revocations += 1
        if self.status == RUNNING:
            self.kills += 1
            self._rollback(ctx.now, self.checkpointed)
            self.status = RECOVERING
            self.next_checkpoint = INF
        ctx.replenish(self.id)

    def on_ready(self, ctx):
        if self.status == RECOVERING and ctx.usable_fraction(self.id) >= 1.0 - 1e-9:
            self.status = RUNNING
            self._resume_checkpoints(ctx.now)


class _Task:
    __slots__ = ("id", "length", "progress", "checkpoint", "pending", "slot", "resumed_at")

    def __init__(self, tid, length):
        self.id = tid
        self.length = length
        self.progress = 0.0
        self.checkpoint = 0.0
        self.pending = None  # (snapshot, durable_at)
        self.slot = None
        self.resumed_at = 0.0

    def at(self, t):
        return self.progress + (t - self.resumed_at) if self.slot is not None else self.progress

    def commit(self, t):
        if self.pending is not None and self.pending[1] <= t + EPS:
            self.checkpoint = max(self.checkpoint, self.pending[0])
            self.pending = None


def apportion(total: int, weights: dict) -> dict:
    """Largest-remainder split of ``total`` slots over ``weights`` (ties by market id)."""
    markets = sorted(weights)
    raw = {m: total * weights[m] for m in markets}
    out = {m: int(math.floor(raw[m] + EPS)) for m in markets}
    left = total - sum(out.values())
    order = sorted(markets, key=lambda m: (-(raw[m] - out[m]), m))
    for m in order[:left]:
        out[m] += 1
    return out


class BagOfTasksApp(AppModel):
    """Independent equal-length tasks on ``slots`` workers spread over the portfolio.

    With checkpointing, a task on a warned server writes a lazy checkpoint
    timed to finish right at revocation; it only succeeds when the warning
    lead covers the write time. A soft warning starts a write immediately.
    On a price-threshold crossing the app gives up that market and re-acquires
    it once the price is back under the threshold. Revoked capacity is not
    replaced unless the app has nothing left.
    """

    kind = "bag-of-tasks"

    def __init__(self, spec, weights, now):
        super().__init__(spec, weights, now)
        k = spec.slots
        task = spec.task_seconds if spec.task_seconds is not None else spec.work_seconds / 4.0
        n_tasks = max(1, int(round(k * spec.work_seconds / task)))
        self.task_length = task
        self.tasks = [_Task(i, task) for i in range(n_tasks)]
        self.queue = deque(self.tasks)
        self.running: dict = {}  # slot -> task
        self.completed = 0
        self.paused: set = set()
        self._baseline = math.ceil(n_tasks / k) * task
        self._last = now

    @property
    def baseline_time(self):
        return self._baseline

    @property
    def progress(self):
        return sum(t.length if t.slot is None and t not in self.queue else t.at(self._last) for t in self.tasks)

    def compute_rate(self, ctx):
        return float(len(self.running)) / self.spec.slots

    def advance(self, dt):
        self._last += dt

    def _active_slots(self, ctx, dispatch=False) -> set:
        slots = set()
        counts = apportion(self.spec.slots, self.weights)
        for m, k in counts.items():
            if dispatch and m in ctx.pending_revocation:
                continue  # nothing new starts on a server that is about to go
            frac = ctx.usable_fraction(self.id, market=m, weights=self.weights)
            for j in range(int(math.floor(k * frac + 1e-9))):
                slots.add((m, j))
        return slots

    def _stop(self, task, t, restore):
        del self.running[task.slot]
        task.progress = task.at(t)
        task.slot = None
        if restore is not None:
            lost = task.progress - restore
            self.rollback_lost += max(0.0, lost)
            task.progress = restore

    def refresh(self, ctx):
        now = ctx.now
        active = self._active_slots(ctx)
        for slot in sorted(set(self.running) - active):
            task = self.running[slot]
            task.commit(now)
            self._stop(task, now, task.checkpoint if self.spec.checkpointing else 0.0)
            self.queue.appendleft(task)
        for slot in sorted(self._active_slots(ctx, dispatch=True) - set(self.running)):
            if not self.queue:
                break
            task = self.queue.popleft()
            task.slot = slot
            task.resumed_at = now
            self.running[slot] = task
        if not self.running and self.queue:
            self.status = WAITING if self.paused else RECOVERING
        elif not self.done:
            self.status = RUNNING

    def next_internal(self, now):
        if not self.running:
            return INF
        return min(now + (t.length - t.at(now)) for t in self.running.values())

    def on_internal(self, ctx):
        now = ctx.now
        for slot, task in sorted(self.running.items()):
            if task.length - task.at(now) <= EPS * max(1.0, task.length):
                del self.running[slot]
                task.slot = None
                task.progress = task.length
                self.completed += 1
        if self.completed == len(self.tasks):
            self._finish(now)
            return
        self.refresh(ctx)

    def _on_market(self, market):
        return [t for (m, _), t in sorted(self.running.items()) if m == market]

    def on_hard_warning(self, ctx, market, revoke_at):
        if not self.spec.checkpointing:
            return
        delta = self.spec.checkpoint_seconds
        if revoke_at - ctx.now + EPS < delta:
            return  # not enough lead to finish a write
        start = revoke_at - delta
        for task in self._on_market(market):
            task.commit(ctx.now)
            task.pending = (task.at(start), revoke_at)
            self.checkpoints_written += 1

    def on_soft_warning(self, ctx, market):
        if not self.spec.checkpointing:
            return
        for task in self._on_market(market):
            task.commit(ctx.now)
            if task.pending is None:
                task.pending = (task.at(ctx.now), ctx.now + self.spec.checkpoint_seconds)
                self.checkpoints_written += 1

    def on_revocation(self, ctx, market, fraction):
        self.revocations += 1
        now = ctx.now
        lost = self._on_market(market)
        for task in reversed(lost):
            task.commit(now)
            self._stop(task, now, task.checkpoint)
            task.pending = None
            self.queue.appendleft(task)
        if ctx.usable_fraction(self.id, include_pending=True) <= EPS and not self.paused:
            ctx.replenish(self.id)
        self.refresh(ctx)

    def on_price_threshold(self, ctx, market, above):
        if above and market in self.weights and market not in self.paused:
            self.paused.add(market)
            for task in reversed(self._on_market(market)):
                # a voluntary release is planned, so the task state is saved first
                keep = task.at(ctx.now) if self.spec.checkpointing else 0.0
                self._stop(task, ctx.now, keep)
                task.checkpoint = max(task.checkpoint, keep)
                self.queue.appendleft(task)
            ctx.release_market(self.id, market)
            self.refresh(ctx)
        elif not above and market in self.paused:
            self.paused.discard(market)
            ctx.acquire_market(self.id, market)
            self.refresh(ctx)

    def on_ready(self, ctx):
        self.refresh(ctx)


MODELS = {m.kind: m for m in (BatchCheckpointApp, RigidApp, BagOfTasksApp)}


def make_app(spec: ApplicationSpec, weights: dict, now: float) -> AppModel:
    return MODELS[spec.kind](spec, weights, now)
