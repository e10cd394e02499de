"""Thermal-aware job supervision.

The supervisor grants a job one step at a time.  Every ``poll_every_steps``
it reads GPU telemetry and may pause the job to let the device cool; every
``checkpoint_every_steps`` it asks the job to persist state.  Epochs run in
chunks separated by fixed cooling breaks.  Everything it does is appended to
an ordered event log.
"""
from __future__ import annotations

import gc
import json
import math
import os
import re
import subprocess
import time
from dataclasses import asdict, dataclass, field, fields, replace
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Callable, Protocol

# event kinds
POLL = "poll"
WARN_PAUSE = "warn_pause"
CRITICAL_PAUSE = "critical_pause"
CHECKPOINT = "checkpoint"
CHUNK_START = "chunk_start"
CHUNK_BREAK = "chunk_break"
RESUME = "resume"
STEP = "step"
JOB_DONE = "job_done"
JOB_FAILED = "job_failed"
TELEMETRY_LOST = "telemetry_lost"

NO_ACTION = "none"

SIM_EPOCH = datetime(2025, 1, 1, tzinfo=timezone.utc)


class SupervisorError(RuntimeError):
    pass


class TelemetryError(SupervisorError):
    pass


class JobFailed(SupervisorError):
    pass


@dataclass(frozen=True)
class ThermalPolicy:
    warn_c: float = 75.0
    critical_c: float = 85.0
    warn_pause_s: float = 30.0
    critical_pause_s: float = 120.0
    poll_every_steps: int = 10
    checkpoint_every_steps: int = 50
    chunk_epochs: int = 5
    chunk_break_s: float = 300.0

    def __post_init__(self):
        if not self.warn_c < self.critical_c:
            raise SupervisorError(f"warn_c ({self.warn_c}) must be below critical_c ({self.critical_c})")
        for f in fields(self):
            if f.name not in ("warn_c", "critical_c") and getattr(self, f.name) <= 0:
                raise SupervisorError(f"{f.name} must be positive")

    @classmethod
    def from_dict(cls, doc: dict) -> "ThermalPolicy":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise SupervisorError(f"unknown policy keys: {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def load(cls, path) -> "ThermalPolicy":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class TelemetrySample:
    temperature_c: float
    power_w: float
    memory_mb: float
    timestamp: str | None = None


_NUMBER = re.compile(r"^\s*([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)\s*([A-Za-z%]*)\s*$")


def parse_telemetry(line: str) -> TelemetrySample:
    """Parse one ``temperature.gpu,power.draw,memory.used`` CSV row."""
    parts = line.strip().split(",")
    if len(parts) != 3:
        raise TelemetryError(f"expected 3 fields, got {len(parts)}: {line!r}")
    values = []
    for part in parts:
        m = _NUMBER.match(part)
        if not m:
            raise TelemetryError(f"non-numeric field {part.strip()!r} in {line!r}")
        values.append(float(m.group(1)))
    temp, power, mem = values
    if not math.isfinite(temp) or mem < 0:
        raise TelemetryError(f"implausible reading {line!r}")
    return TelemetrySample(temp, power, mem)


@dataclass(frozen=True)
class Action:
    kind: str
    duration_s: float = 0.0
    cleanup: bool = False
    checkpoint: bool = False


def evaluate_policy(sample: TelemetrySample, policy: ThermalPolicy) -> Action:
    t = sample.temperature_c
    if t >= policy.critical_c:
        return Action(CRITICAL_PAUSE, policy.critical_pause_s, cleanup=True, checkpoint=True)
    if t >= policy.warn_c:
        return Action(WARN_PAUSE, policy.warn_pause_s)
    return Action(NO_ACTION)


def step_gate(step: int, policy: ThermalPolicy) -> tuple[bool, bool]:
    if step < 1:
        raise SupervisorError(f"steps are counted from 1, got {step}")
    return step % policy.poll_every_steps == 0, step % policy.checkpoint_every_steps == 0


def partition_epochs(total_epochs: int, chunk_epochs: int) -> list[list[int]]:
    if total_epochs < 1:
        raise SupervisorError("total_epochs must be at least 1")
    epochs = list(range(1, total_epochs + 1))
    return [epochs[i:i + chunk_epochs] for i in range(0, total_epochs, chunk_epochs)]


# -- clocks ----------------------------------------------------------------

class SimulatedClock:
    """Clock whose ``sleep`` only advances a counter."""

    def __init__(self, start: datetime = SIM_EPOCH):
        self.start = start
        self.elapsed = 0.0

    def now(self) -> datetime:
        return self.start + timedelta(seconds=self.elapsed)

    def sleep(self, seconds: float) -> None:
        self.elapsed += seconds


class WallClock:
    def now(self) -> datetime:
        return datetime.now(timezone.utc)

    def sleep(self, seconds: float) -> None:
        time.sleep(seconds)


# -- telemetry providers ---------------------------------------------------

class ScriptedTelemetry:
    """Constant baseline temperature with per-step overrides."""

    def __init__(self, base_c: float = 70.0, spikes: dict[int, float] | None = None,
                 power_w: float = 90.0, memory_mb: float = 4096.0):
        self.base_c = base_c
        self.spikes = dict(spikes or {})
        self.power_w = power_w
        self.memory_mb = memory_mb

    def read(self, step: int) -> TelemetrySample:
        return TelemetrySample(self.spikes.get(step, self.base_c), self.power_w, self.memory_mb)

    @classmethod
    def from_dict(cls, doc: dict) -> "ScriptedTelemetry":
        return cls(base_c=doc.get("base_c", 70.0),
                   spikes={int(k): float(v) for k, v in doc.get("spikes", {}).items()},
                   power_w=doc.get("power_w", 90.0), memory_mb=doc.get("memory_mb", 4096.0))


class ReplayTelemetry:
    """Replays recorded CSV rows, one per poll; running out counts as lost telemetry."""

    def __init__(self, lines):
        self.lines = [ln for ln in lines if ln.strip() and not ln.lstrip().startswith("#")]
        self.pos = 0

    @classmethod
    def from_file(cls, path) -> "ReplayTelemetry":
        return cls(Path(path).read_text().splitlines())

    def read(self, step: int) -> TelemetrySample:
        if self.pos >= len(self.lines):
            raise TelemetryError("replay exhausted")
        line = self.lines[self.pos]
        self.pos += 1
        return parse_telemetry(line)


class NvidiaSmiTelemetry:
    QUERY = ["nvidia-smi", "--query-gpu=temperature.gpu,power.draw,memory.used",
             "--format=csv,noheader,nounits"]

    def __init__(self, gpu_index: int = 0, timeout_s: float = 5.0):
        self.gpu_index = gpu_index
        self.timeout_s = timeout_s

    def read(self, step: int) -> TelemetrySample:
        cmd = self.QUERY + [f"--id={self.gpu_index}"]
        try:
            out = subprocess.run(cmd, capture_output=True, text=True, timeout=self.timeout_s, check=True)
        except (OSError, subprocess.SubprocessError) as exc:
            raise TelemetryError(f"nvidia-smi failed: {exc}") from exc
        lines = [ln for ln in out.stdout.splitlines() if ln.strip()]
        if not lines:
            raise TelemetryError("nvidia-smi returned no rows")
        return parse_telemetry(lines[0])


def load_telemetry(spec: str):
    """``nvidia-smi``, a ``.json`` script or a CSV replay file."""
    if spec == "nvidia-smi":
        return NvidiaSmiTelemetry()
    if spec.endswith(".json"):
        return ScriptedTelemetry.from_dict(json.loads(Path(spec).read_text()))
    return ReplayTelemetry.from_file(spec)


# -- jobs ------------------------------------------------------------------

class Job(Protocol):
    steps_per_epoch: int

    def step(self, epoch: int, step: int) -> None: ...

    def checkpoint(self, step: int) -> str: ...


@dataclass
class DemoJob:
    """Stand-in training job: counts steps, checkpoints are references only."""

    steps_per_epoch: int = 20
    fail_at_step: int | None = None
    completed: list[int] = field(default_factory=list)

    def step(self, epoch: int, step: int) -> None:
        if step == self.fail_at_step:
            raise JobFailed(f"demo job failure at step {step}")
        self.completed.append(step)

    def checkpoint(self, step: int) -> str:
        return f"ckpt-step-{step:06d}"


@dataclass
class CommandJob:
    """Runs an external command once per step (and once per checkpoint).

    The command sees ``ENDOSIGHT_ACTION`` (``step`` or ``checkpoint``),
    ``ENDOSIGHT_STEP`` and ``ENDOSIGHT_EPOCH`` in its environment.
    """

    argv: list[str]
    steps_per_epoch: int = 1
    epoch: int = 0

    def _run(self, action: str, step: int) -> None:
        env = dict(os.environ, ENDOSIGHT_ACTION=action, ENDOSIGHT_STEP=str(step),
                   ENDOSIGHT_EPOCH=str(self.epoch))
        try:
            res = subprocess.run(self.argv, env=env)
        except OSError as exc:
            raise JobFailed(f"cannot run {self.argv[0]!r}: {exc}") from exc
        if res.returncode != 0:
            raise JobFailed(f"{action} at step {step} exited with status {res.returncode}")

    def step(self, epoch: int, step: int) -> None:
        self.epoch = epoch
        self._run("step", step)

    def checkpoint(self, step: int) -> str:
        self._run("checkpoint", step)
        return f"step-{step}"


# -- event log -------------------------------------------------------------

@dataclass(frozen=True)
class SupervisorEvent:
    seq: int
    time: str
    kind: str
    step: int | None = None
    epoch: int | None = None
    payload: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


class EventLog:
    """Append-only; optionally mirrored line by line into a JSONL file."""

    def __init__(self, clock, sink=None):
        self.clock = clock
        self.events: list[SupervisorEvent] = []
        self._sink = sink

    def append(self, kind: str, step=None, epoch=None, **payload) -> SupervisorEvent:
        ev = SupervisorEvent(len(self.events), self.clock.now().isoformat(), kind, step, epoch, payload)
        self.events.append(ev)
        if self._sink is not None:
            self._sink.write(ev.to_json() + "\n")
            self._sink.flush()
        return ev

    def of_kind(self, kind: str) -> list[SupervisorEvent]:
        return [e for e in self.events if e.kind == kind]

    @property
    def failed(self) -> bool:
        return any(e.kind == JOB_FAILED for e in self.events)

    def to_jsonl(self) -> str:
        return "".join(e.to_json() + "\n" for e in self.events)


class _Abort(Exception):
    """Unwinds the supervision loop after a logged job failure."""


class _Run:
    def __init__(self, policy, job, telemetry, clock, hooks, log, step_time_s):
        self.policy, self.job, self.telemetry, self.clock = policy, job, telemetry, clock
        self.hooks, self.log, self.step_time_s = hooks, log, step_time_s
        self.step = 0
        self.last_ckpt = None

    def fail(self, epoch, exc):
        self.log.append(JOB_FAILED, self.step, epoch, error=str(exc), last_checkpoint=self.last_ckpt)
        raise _Abort from exc

    def pause(self, kind, duration, epoch, **payload):
        self.log.append(kind, self.step, epoch, duration_s=duration, **payload)
        self.clock.sleep(duration)
        self.log.append(RESUME, self.step, epoch, after=kind)

    def checkpoint(self, epoch, reason):
        try:
            ref = self.job.checkpoint(self.step)
        except Exception as exc:
            self.fail(epoch, exc)
        self.last_ckpt = ref
        self.log.append(CHECKPOINT, self.step, epoch, reason=reason, ref=ref)

    def poll(self, epoch) -> Action:
        try:
            sample = self.telemetry.read(self.step)
        except TelemetryError as exc:
            self.log.append(TELEMETRY_LOST, self.step, epoch, error=str(exc))
            return Action(WARN_PAUSE, self.policy.warn_pause_s)
        if sample.timestamp is None:
            sample = replace(sample, timestamp=self.clock.now().isoformat())
        self.log.append(POLL, self.step, epoch, **asdict(sample))
        return evaluate_policy(sample, self.policy)

    def run_step(self, epoch):
        self.step += 1
        try:
            self.job.step(epoch, self.step)
        except Exception as exc:
            self.fail(epoch, exc)
        if isinstance(self.clock, SimulatedClock):
            self.clock.sleep(self.step_time_s)
        self.log.append(STEP, self.step, epoch)
        poll, ckpt = step_gate(self.step, self.policy)
        if ckpt:
            self.checkpoint(epoch, "periodic")
        if not poll:
            return
        action = self.poll(epoch)
        if action.kind == CRITICAL_PAUSE:
            self.checkpoint(epoch, "pre_pause")
            for hook in self.hooks:
                hook()
            self.pause(CRITICAL_PAUSE, action.duration_s, epoch, cleanup_hooks=len(self.hooks))
        elif action.kind == WARN_PAUSE:
            self.pause(WARN_PAUSE, action.duration_s, epoch)


def run_chunked(total_epochs: int, policy: ThermalPolicy, job: Job, telemetry, clock=None,
                cleanup_hooks: list[Callable[[], object]] | None = None, sink=None,
                step_time_s: float = 0.0) -> EventLog:
    """Drive ``job`` through ``total_epochs`` under ``policy``.

    ``step_time_s`` is how far a simulated clock advances per step; it is
    ignored by the wall clock because real steps take real time.
    """
    clock = clock or SimulatedClock()
    hooks = [gc.collect] if cleanup_hooks is None else list(cleanup_hooks)
    log = EventLog(clock, sink)
    run = _Run(policy, job, telemetry, clock, hooks, log, step_time_s)
    chunks = partition_epochs(total_epochs, policy.chunk_epochs)
    try:
        for ci, chunk in enumerate(chunks):
            if ci:
                run.pause(CHUNK_BREAK, policy.chunk_break_s, chunk[0], chunk=ci)
            log.append(CHUNK_START, run.step, chunk[0], chunk=ci, epochs=chunk)
            for epoch in chunk:
                for _ in range(job.steps_per_epoch):
                    run.run_step(epoch)
    except _Abort:
        return log
    log.append(JOB_DONE, run.step, total_epochs, steps=run.step, last_checkpoint=run.last_ckpt)
    return log
