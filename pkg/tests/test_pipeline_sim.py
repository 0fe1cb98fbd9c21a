import io
import random
from fractions import Fraction

import pytest

from fastckpt.ckpt_format import load_parallel
from fastckpt.perf_model import DomainError
from fastckpt.pipeline_sim import (
    CkptTask,
    Event,
    LiveSink,
    ScheduleMode,
    TrainConfig,
    closed_form_iter_time,
    gas_sweep,
    run_live,
    schedule_violations,
    simulate,
    synthetic_state,
    write_events_csv,
    write_summary_csv,
)
from fastckpt.write_engine import StagingBuffer

BASE = TrainConfig(t_forward=0.4, t_backward=0.6, t_optimizer=0.1, iterations=10)


def test_worked_example():
    ckpt = CkptTask(bytes=10, bandwidth=20)  # 0.5 s
    seq = simulate(BASE.with_(mode="sequential"), ckpt)
    pipe = simulate(BASE.with_(mode="pipelined"), ckpt)
    none = simulate(BASE.with_(mode="none"), ckpt)
    assert seq.steady_state_iter_time == pytest.approx(1.6)
    assert pipe.steady_state_iter_time == pytest.approx(1.1)
    assert none.steady_state_iter_time == pytest.approx(1.1)
    assert seq.slowdown == pytest.approx(1.6 / 1.1)
    assert pipe.slowdown == 1.0
    assert pipe.stall_seconds == 0
    assert pipe.drain_seconds == pytest.approx(0.5)


def test_zero_checkpoint_time_all_modes_equal():
    ckpt = CkptTask(bytes=0, bandwidth=0)
    times = {m: simulate(BASE.with_(mode=m), ckpt).steady_state_iter_time for m in ScheduleMode}
    assert len(set(times.values())) == 1


def test_pipelined_stalls_when_checkpoint_outlasts_compute():
    ckpt = CkptTask(bytes=3, bandwidth=2)  # 1.5 s vs 1.0 s of F+B
    r = simulate(BASE.with_(mode="pipelined"), ckpt)
    assert r.steady_state_iter_time == pytest.approx(1.6)
    assert r.stall_seconds == pytest.approx(0.5 * 9)
    assert any(e.phase == "STALL" for e in r.events)


def test_stall_threshold_is_exact():
    # bandwidth exactly S / (gas * (F + B)) => no stall
    train = TrainConfig(1, 1, 0, gas=2, iterations=5)
    assert simulate(train, CkptTask(bytes=400, bandwidth=100)).stall_seconds == 0
    assert simulate(train, CkptTask(bytes=401, bandwidth=100)).stall_seconds > 0


def test_single_iteration():
    r = simulate(BASE.with_(iterations=1), CkptTask(bytes=10, bandwidth=20))
    phases = [e.phase for e in r.events]
    assert phases.count("CKPT_REQ") == 1 and phases.count("CKPT_DONE") == 1
    assert r.steady_state_iter_time == pytest.approx(1.1)
    assert float(closed_form_iter_time(BASE.with_(iterations=1), 0.5)) == pytest.approx(1.1)


def test_zero_bandwidth_rejected():
    with pytest.raises(DomainError):
        simulate(BASE, CkptTask(bytes=1, bandwidth=0))
    with pytest.raises(ValueError):
        CkptTask(bytes=1)
    with pytest.raises(DomainError):
        TrainConfig(1, 1, gas=0)


def test_gas_sweep_trend():
    rows = gas_sweep(BASE.with_(t_optimizer=0.2), [1, 2, 4, 8, 16], CkptTask(bytes=25, bandwidth=10))
    pipe = [r.slowdown for r in rows if r.mode is ScheduleMode.PIPELINED]
    seq = [r.slowdown for r in rows if r.mode is ScheduleMode.SEQUENTIAL]
    assert all(a >= b for a, b in zip(pipe, pipe[1:]))
    assert all(p <= s for p, s in zip(pipe, seq))
    assert pipe[0] > 1 and pipe[-1] == 1.0


def test_huge_checkpoint_ratio_tends_to_one():
    r_p = simulate(BASE, CkptTask(bytes=10**9, bandwidth=1))
    r_s = simulate(BASE.with_(mode="sequential"), CkptTask(bytes=10**9, bandwidth=1))
    assert r_s.slowdown / r_p.slowdown == pytest.approx(1.0, rel=1e-8)


def test_violation_checker_catches_bad_logs():
    good = simulate(BASE, CkptTask(bytes=30, bandwidth=20)).events
    assert schedule_violations(good) == []
    bad = [
        Event(0, "CKPT_REQ", 1.0, 1.0),
        Event(0, "CKPT_DONE", 1.0, 3.0),
        Event(1, "O", 2.0, 2.1),
        Event(1, "CKPT_REQ", 2.1, 2.1),
    ]
    problems = schedule_violations(bad)
    assert any("optimizer 1" in p for p in problems)
    assert any("outstanding" in p for p in problems)
    assert any("never completed" in p for p in problems)


def test_csv_outputs():
    r = simulate(BASE.with_(iterations=2), CkptTask(bytes=10, bandwidth=20))
    buf = io.StringIO()
    write_events_csv(r.events, buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "iter,phase,start_s,end_s"
    assert len(lines) == 1 + len(r.events)
    buf = io.StringIO()
    write_summary_csv([r], buf)
    assert buf.getvalue().splitlines()[0].startswith("mode,gas,iterations")


def test_random_sweep_matches_closed_forms():
    rng = random.Random(7)
    for _ in range(100):
        train = TrainConfig(
            rng.uniform(0, 1), rng.uniform(0, 1), rng.uniform(0, 0.5), gas=rng.randint(1, 8),
            iterations=rng.randint(2, 6), mode=rng.choice(list(ScheduleMode)),
        )
        ckpt = CkptTask(bytes=rng.randint(0, 10**10), bandwidth=rng.uniform(1e8, 1e11))
        r = simulate(train, ckpt)
        t_ckpt = Fraction(ckpt.bytes) / Fraction(ckpt.bandwidth)
        assert r.steady_state_iter_time == float(closed_form_iter_time(train, t_ckpt))
        assert schedule_violations(r.events) == []


def test_live_run_writes_verifiable_checkpoints(scratch):
    sink = LiveSink(scratch, buffer=StagingBuffer(capacity=1 << 20), seed=3)
    train = TrainConfig(0.01, 0.01, 0.0, iterations=3)
    r = run_live(train, CkptTask(bytes=2 << 20, live=sink), writer_count=2)
    assert len(r.checkpoints) == 3
    assert r.persister_allocations == 0 and r.persister_collectives == 0
    assert schedule_violations(r.events) == []
    records = load_parallel(r.checkpoints[-1], reader_count=2)
    expected = {rec.name: rec for rec in synthetic_state(2 << 20, 3)}
    names = [rec.name for rec in records]
    assert "optimizer.step" in names
    for rec in records:
        if rec.name in expected:
            assert rec == expected[rec.name]
    step = next(rec for rec in records if rec.name == "optimizer.step")
    assert int.from_bytes(step.payload, "little") == 3


def test_live_missing_scratch(tmp_path):
    from fastckpt.pipeline_sim import LiveRunError

    with pytest.raises(LiveRunError):
        run_live(BASE.with_(iterations=1), CkptTask(bytes=1, live=LiveSink(tmp_path / "nope")))
