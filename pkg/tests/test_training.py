import io
import json

import numpy as np
import pytest
import torch

from cott.data import SynthConfig, synth_generate
from cott.errors import ConfigError, CorruptCheckpoint, EmptyDataset, VersionMismatch
from cott.reasoner import step_one, step_two
from cott.training import (
    DESK_SCALE,
    TrainConfig,
    batch_loss,
    build_model,
    instance_loss,
    learning_rate_at,
    load_checkpoint,
    load_config,
    save_checkpoint,
    train,
)

from conftest import central_difference, relative_error


def rng():
    return np.random.default_rng(0)


def numpy_loss(b, g, task, x, counterfactual, cfg):
    """Straight-line re-computation of the four loss terms from the public
    single-instance reasoner API and plain numpy."""
    first = step_one(b, task, x)
    step_nll = -sum(np.log(d[s]) for d, s in zip(first.step_dists, x.step))
    label_nll = -np.log(first.label_dist[x.label])
    p2, h2, _ = step_two(b, task, x, first.step)
    step2_nll = -np.log(p2[x.label])
    _, h_neg, _ = step_two(b, task, x, counterfactual)
    W1 = g.W1.detach().numpy()
    W2 = g.W2.detach().numpy()

    def z(h):
        return W2 @ np.maximum(W1 @ h, 0.0)

    def cos(a, c):
        return a @ c / (np.linalg.norm(a) * np.linalg.norm(c))

    zx = z(first.h_x)
    sp, sn = cos(zx, z(h2)) / cfg.tau, cos(zx, z(h_neg)) / cfg.tau
    lc = np.logaddexp(sp, sn) - sp
    return cfg.alpha * step_nll + label_nll + cfg.beta * lc + step2_nll, (step_nll, label_nll, lc, step2_nll)


def test_loss_matches_numpy_oracle(hc_task, tiny_backend, tiny_head, hc_instances):
    cfg = TrainConfig(alpha=0.3, beta=0.7, tau=0.5)
    tiny_backend.eval()
    for x in hc_instances:
        cf = ("Med",) if step_one(tiny_backend, hc_task, x).step != ("Med",) else ("Bio",)
        loss, diag = instance_loss(tiny_backend, tiny_head, hc_task, x, rng(), cfg, counterfactual=cf)
        expected, terms = numpy_loss(tiny_backend, tiny_head, hc_task, x, cf, cfg)
        assert relative_error(loss.item(), expected) < 1e-10
        assert relative_error(diag["step_nll"], terms[0]) < 1e-10
        assert relative_error(diag["contrastive"], terms[2]) < 1e-10


def test_zero_weights_leave_two_label_terms(hc_task, tiny_backend, tiny_head, hc_instances):
    x = hc_instances[0]
    cfg = TrainConfig(alpha=0.0, beta=0.0)
    loss, diag = instance_loss(tiny_backend, tiny_head, hc_task, x, rng(), cfg)
    first = step_one(tiny_backend, hc_task, x)
    p2 = step_two(tiny_backend, hc_task, x, first.step)[0]
    expected = -np.log(first.label_dist[x.label]) - np.log(p2[x.label])
    assert relative_error(loss.item(), expected) < 1e-10
    assert diag["counterfactual_evaluations"] == 0


def test_beta_zero_skips_counterfactual_forward(hc_task, tiny_backend, tiny_head, hc_instances):
    _, diag = batch_loss(tiny_backend, tiny_head, hc_task, hc_instances, rng(), TrainConfig(beta=0.0))
    assert diag["counterfactual_evaluations"] == 0
    _, diag = batch_loss(tiny_backend, tiny_head, hc_task, hc_instances, rng(), TrainConfig())
    assert diag["counterfactual_evaluations"] == len(hc_instances)


def test_batch_loss_is_mean_of_instance_losses(hc_task, tiny_backend, tiny_head, hc_instances):
    cfg = TrainConfig()
    tiny_backend.eval()
    cfs = [("CS",), ("Med",), ("Bio",)]
    total, _ = batch_loss(tiny_backend, tiny_head, hc_task, hc_instances, rng(), cfg, cfs)
    singles = [
        instance_loss(tiny_backend, tiny_head, hc_task, x, rng(), cfg, counterfactual=c)[0].item()
        for x, c in zip(hc_instances, cfs)
    ]
    assert abs(total.item() - np.mean(singles)) < 1e-9


def test_loss_gradient_matches_finite_differences(hc_task, tiny_backend, tiny_head, hc_instances):
    cfg = TrainConfig(alpha=0.5, beta=0.5)
    tiny_backend.eval()
    x = hc_instances[1]
    first = step_one(tiny_backend, hc_task, x)
    cf = next((s,) for s in hc_task.step_sets[0] if (s,) != first.step)

    def f():
        return instance_loss(tiny_backend, tiny_head, hc_task, x, rng(), cfg, counterfactual=cf)[0]

    # small parameter tensors covering each term: step and label word rows,
    # the final norm, and the projection head
    vocab = tiny_backend.vocab
    emb = tiny_backend.encoder.tok.weight
    rows = [vocab.id("<step0:CS>"), vocab.id("<label:ML>")]
    targets = [tiny_head.W1, tiny_backend.encoder.norm.weight]
    for p in targets:
        tiny_backend.zero_grad()
        tiny_head.zero_grad()
        f().backward()
        analytic = p.grad.detach().clone()
        with torch.no_grad():
            numeric = central_difference(f, p)
        assert relative_error(analytic.numpy(), numeric.numpy()).max() < 1e-4
    tiny_backend.zero_grad()
    f().backward()
    analytic = emb.grad[rows].detach().clone()
    with torch.no_grad():
        sub = emb.data[rows].clone()

        def g():
            emb.data[rows] = sub
            return f()

        numeric = central_difference(g, sub)
        emb.data[rows] = sub
    assert relative_error(analytic.numpy(), numeric.numpy()).max() < 1e-4


def test_confident_correct_prediction_has_near_zero_nll(hc_task, tiny_backend, tiny_head, hc_instances):
    x = hc_instances[0]
    vocab = tiny_backend.vocab
    emb = tiny_backend.encoder.tok.weight
    with torch.no_grad():
        for w in ("<step0:Bio>", "<label:Gene>"):
            emb[vocab.id(w)] *= 0.0
        h = torch.tensor(step_one(tiny_backend, hc_task, x).h_x)
    # a word aligned with the hidden state at scale dominates the others
    with torch.no_grad():
        emb[vocab.id("<step0:Bio>")] = 1e4 * h / h.norm() ** 2
    _, diag = instance_loss(tiny_backend, tiny_head, hc_task, x, rng(), TrainConfig(beta=0.0))
    assert diag["step_nll"] < 1e-8


def test_learning_rate_schedule():
    cfg = TrainConfig()
    assert [learning_rate_at(cfg, e) for e in range(5)] == [1e-5, 1e-5, 5e-6, 5e-6, 2.5e-6]


def test_config_validation(tmp_path):
    with pytest.raises(ConfigError):
        TrainConfig(tau=0.0)
    with pytest.raises(ConfigError):
        TrainConfig.from_mapping({"alpha": 0.1, "gamma": 2})
    with pytest.raises(ConfigError):
        TrainConfig.from_mapping({"epochs": "ten"})
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"alpha": 0.2, "epochs": 3}))
    cfg = load_config(p)
    assert cfg.alpha == 0.2 and cfg.epochs == 3 and cfg.beta == 0.1
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(p)


def small_task(seed=0, n=96):
    return synth_generate(SynthConfig(n_train=n, n_test=32, num_steps=3, labels_per_step=2, seed=seed))


def test_loss_decreases_over_fifty_steps():
    task, splits = small_task()
    cfg = TrainConfig(**DESK_SCALE, hidden_size=16, num_heads=2)
    b, g = build_model(task, splits["train"], cfg)
    opt = torch.optim.Adam(list(b.parameters()) + list(g.parameters()), lr=cfg.learning_rate)
    batch = splits["train"][:16]
    r = np.random.default_rng(0)
    losses = []
    for _ in range(50):
        loss, _ = batch_loss(b, g, task, batch, r, cfg)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    assert np.mean(losses[-5:]) < 0.5 * np.mean(losses[:5])


def test_training_is_deterministic():
    task, splits = small_task()
    cfg = TrainConfig(**DESK_SCALE, epochs=2, hidden_size=16, num_heads=2)
    logs = []
    params = []
    for _ in range(2):
        buf = io.StringIO()
        res = train(cfg, splits, task, log=buf)
        logs.append(buf.getvalue())
        params.append(torch.cat([p.detach().flatten() for p in res.backend.parameters()]))
    assert logs[0] == logs[1]
    assert torch.equal(params[0], params[1])
    first = json.loads(logs[0].splitlines()[0])
    assert {"step", "epoch", "lr", "loss", "contrastive"} <= set(first)


def test_training_requires_data():
    task, splits = small_task()
    with pytest.raises(EmptyDataset):
        train(TrainConfig(), {"train": []}, task)


def test_checkpoint_round_trip(tmp_path, hc_task, tiny_backend, tiny_head, hc_instances):
    path = tmp_path / "m.pt"
    cfg = TrainConfig(hidden_size=16, num_heads=2)
    save_checkpoint(path, tiny_backend, tiny_head, hc_task, cfg)
    ck = load_checkpoint(path)
    assert ck.task == hc_task and ck.config == cfg
    tiny_backend.eval()
    a = tiny_backend.hidden([p for p in _prompts(hc_task, hc_instances)])
    b = ck.backend.hidden([p for p in _prompts(hc_task, hc_instances)])
    assert torch.equal(a, b)
    for (k, v), (k2, v2) in zip(tiny_head.state_dict().items(), ck.head.state_dict().items()):
        assert k == k2 and torch.equal(v, v2)


def _prompts(task, instances):
    from cott.prompt import compile_template, render_step1

    t = compile_template(task.template)
    return [render_step1(t, x.text) for x in instances]


def test_damaged_checkpoints(tmp_path, hc_task, tiny_backend, tiny_head):
    path = tmp_path / "m.pt"
    save_checkpoint(path, tiny_backend, tiny_head, hc_task, TrainConfig())
    data = path.read_bytes()
    (tmp_path / "cut.pt").write_bytes(data[: len(data) // 2])
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(tmp_path / "cut.pt")
    (tmp_path / "junk.pt").write_bytes(b"not a checkpoint")
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(tmp_path / "junk.pt")

    payload = torch.load(path, weights_only=True)
    payload["version"] = 0
    torch.save(payload, tmp_path / "old.pt")
    with pytest.raises(VersionMismatch):
        load_checkpoint(tmp_path / "old.pt")
