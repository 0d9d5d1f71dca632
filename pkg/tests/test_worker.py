import math

from wanspec.oracle import Prediction
from wanspec.spectree import ROOT
from wanspec.wire import Eos, Speculation, Validation
from wanspec.worker import DraftTarget, Idle, StepDraft, Worker, WorkerConfig, WorkerFinish

LOW = Prediction(((5, 0.8), (6, 0.1)), 0.2)
HIGH = Prediction(((5, 0.45), (6, 0.3)), 0.8)


def step(w, pred_for=lambda tg: LOW, inbox=()):
    action = w.poll(inbox)
    assert isinstance(action, StepDraft)
    return w.apply_draft_output([(tg, pred_for(tg)) for tg in action.targets])


def test_bootstrap_targets_root():
    w = Worker(WorkerConfig())
    action = w.poll()
    assert action == StepDraft((DraftTarget(ROOT, 0, ()),))


def test_branching_by_entropy():
    w = Worker(WorkerConfig(b=2, theta=0.5))
    assert len(w.candidates_for(LOW)) == 1
    assert len(w.candidates_for(HIGH)) == 2
    assert len(Worker(WorkerConfig(b=1)).candidates_for(HIGH)) == 1


def test_speculation_content():
    w = Worker(WorkerConfig())
    (msg,) = step(w)
    assert msg == Speculation(0, 0, 0, (), ((5, 0.8, 0.2),))
    (msg,) = step(w)
    assert msg.path == (5,) and msg.seq_no == 1


def test_matching_validation_advances_before_step():
    w = Worker(WorkerConfig())
    step(w)
    step(w)
    action = w.poll([Validation(0, 0, 0, (5,), 5, 0.1)])
    assert w.committed == [5, 5]
    assert isinstance(action, StepDraft)
    assert action.targets[0].offset == 2 and action.targets[0].path == ()


def test_diverging_validation_restarts_from_root():
    w = Worker(WorkerConfig())
    step(w)
    step(w)
    action = w.poll([Validation(0, 0, 0, (), 9, 0.1)])
    assert len(w.tree) == 0
    assert action.targets == (DraftTarget(ROOT, 1, ()),)


def test_prune_mid_step_drops_stale_output():
    w = Worker(WorkerConfig())
    action = w.poll()
    w.ingest([Validation(0, 0, 0, (), 9, 0.1)])
    out = w.apply_draft_output([(tg, LOW) for tg in action.targets])
    # the root anchor at offset 0 now names a committed position
    assert out == [] and w.stale_outputs == 1


def test_prune_mid_step_keeps_rebased_output():
    w = Worker(WorkerConfig(s=1))
    step(w)
    action = w.poll()  # extends the node for token 5
    w.ingest([Validation(0, 0, 0, (), 5, 0.1)])
    (msg,) = w.apply_draft_output([(tg, LOW) for tg in action.targets])
    assert msg.offset == 1 and msg.path == ()


def test_theta_infinite_is_a_chain():
    w = Worker(WorkerConfig(b=2, theta=math.inf, s=4))
    for n in range(1, 11):
        msgs = step(w, lambda tg: HIGH)
        assert len(msgs) == 1
        assert len(w.tree) == n


def test_theta_zero_branches_every_step():
    w = Worker(WorkerConfig(b=2, theta=0.0, s=1))
    for _ in range(5):
        step(w)
    assert w.branches == 5


def test_s_caps_batch():
    w = Worker(WorkerConfig(b=2, theta=0.0, s=3))
    step(w)
    step(w)
    action = w.poll()
    assert len(action.targets) == 3


def test_eos_finishes():
    w = Worker(WorkerConfig())
    assert w.poll([Eos(0, 0, 10)]) == WorkerFinish()


def test_eos_leaf_not_extended():
    w = Worker(WorkerConfig(), eos_id=5)
    step(w)
    assert w.poll() == Idle()
