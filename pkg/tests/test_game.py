import numpy as np
import pytest

from refgame import autodiff as ad
from refgame.config import ExperimentConfig
from refgame.datasets import SyntheticSpec, epoch_batches, generate_synthetic, noise_pairs
from refgame.diffrank import SoftRankConfig
from refgame.game import (BaselineState, Trainer, ce_loss, play_round, rsa_penalty, rsa_terms,
                          speaker_policy_loss)
from gradcheck import check_gradients

TINY = dict(items_per_category=12, speaker_hidden=8, listener_hidden=8, embed_dim=4,
            input_dim=8, batch_size=8, epochs=2, vocab_size=4, max_len=3)


def test_ce_loss_examples():
    assert ce_loss(np.array([[0.5, 0.5]]), [0]).item() == pytest.approx(np.log(2), abs=1e-12)
    assert ce_loss(np.array([[1.0, 0.0]]), [0]).item() == pytest.approx(0.0, abs=1e-12)
    assert ce_loss(np.array([[1.0, 0.0]]), [1]).item() == pytest.approx(-np.log(1e-12), rel=1e-9)


def test_ce_loss_gradient():
    rng = np.random.default_rng(0)
    for _ in range(10):
        logits = rng.normal(size=(5, 3))
        idx = rng.integers(0, 3, size=5)
        assert check_gradients(lambda z: ce_loss(ad.softmax(z), idx), [logits]) < 1e-6


def test_rsa_penalty_identical_representations_is_near_zero():
    X = np.random.default_rng(1).normal(size=(20, 6))
    out = rsa_penalty(X, X, X, SoftRankConfig(1e-4)).item()
    assert abs(out) < 1e-2


def test_rsa_penalty_range_and_minimum_items():
    rng = np.random.default_rng(2)
    value = rsa_penalty(rng.normal(size=(10, 4)), rng.normal(size=(10, 4)), rng.normal(size=(10, 5))).item()
    assert 0.0 <= value <= 6.0
    with pytest.raises(ValueError):
        rsa_penalty(np.ones((2, 3)), np.ones((2, 3)), np.ones((2, 3)))


def test_rsa_penalty_gradient():
    rng = np.random.default_rng(3)
    for _ in range(10):
        s, l, x = rng.normal(size=(6, 3)), rng.normal(size=(6, 4)), rng.normal(size=(6, 5))
        assert check_gradients(lambda a, b: rsa_penalty(a, b, x, SoftRankConfig(0.5)), [s, l]) < 1e-5


def test_rsa_terms_are_symmetric_in_direction():
    rng = np.random.default_rng(4)
    s, l, x = rng.normal(size=(8, 3)), rng.normal(size=(8, 3)), rng.normal(size=(8, 3))
    sl, si, li = (t.item() for t in rsa_terms(s, l, x))
    ls, li2, si2 = (t.item() for t in rsa_terms(l, s, x))
    assert (sl, si, li) == pytest.approx((ls, si2, li2), abs=1e-12)


def test_baseline_is_running_mean():
    b = BaselineState()
    assert b.mean == 0.0
    for v in (1.0, 2.0, 6.0):
        b.update(v)
    assert b.mean == pytest.approx(3.0)


def test_policy_loss_uses_baseline_before_update():
    logp = ad.parameter(np.array([-1.0, -2.0]))
    ent = ad.parameter(np.array([0.5, 0.5]))
    b = BaselineState()
    b.update(1.0)
    loss, policy, entropy = speaker_policy_loss(logp, ent, np.array([2.0, 0.0]), b, 0.1)
    # advantages (1, -1): policy = mean(-(a * logp)) = mean(1, -2)
    assert policy.item() == pytest.approx(-0.5)
    assert loss.item() == pytest.approx(-0.5 - 0.05)
    assert b.mean == pytest.approx(1.0)
    ad.backward(loss)
    np.testing.assert_allclose(logp.grad, [-0.5, 0.5])
    np.testing.assert_allclose(ent.grad, [-0.05, -0.05])


def test_rsa_penalty_has_no_path_to_output_projection():
    cfg = ExperimentConfig(loss="ce_rsa", **TINY)
    ds = generate_synthetic(cfg.synthetic_spec(), np.random.default_rng(0))
    tr = Trainer(cfg, ds.dim, 0)
    inputs = next(epoch_batches(ds, "train", 8, 2, np.random.default_rng(0)))
    round_ = play_round(inputs, tr.agents, cfg.max_len, True, np.random.default_rng(1))
    penalty = rsa_penalty(round_.r_s, round_.r_l_targets, inputs.target_embeddings)
    params = tr.agents.speaker.parameters() + tr.agents.listener.parameters()
    ad.zero_grads(params)
    ad.backward(penalty)
    for p in tr.agents.speaker.output_proj.parameters():
        assert (p.grad == 0).all()
    assert np.abs(tr.agents.speaker.repr_layer.weight.grad).sum() > 0


def test_trainer_is_deterministic_and_evaluation_is_pure():
    cfg = ExperimentConfig(**TINY)
    ds = generate_synthetic(cfg.synthetic_spec(), np.random.default_rng(0))
    runs = []
    for _ in range(2):
        tr = Trainer(cfg, ds.dim, 5)
        rows = [tr.train_epoch(ds) for _ in range(2)]
        first = tr.evaluate(ds)
        again = tr.evaluate(ds)
        assert first == again
        runs.append(rows + [first])
    assert runs[0] == runs[1]


def test_same_seed_same_initialization_across_losses():
    ds = generate_synthetic(SyntheticSpec(items_per_category=12, dim=8), np.random.default_rng(0))
    a = Trainer(ExperimentConfig(loss="ce", **TINY), ds.dim, 3)
    b = Trainer(ExperimentConfig(loss="ce_rsa", **TINY), ds.dim, 3)
    for k, v in a.agents.state_dict().items():
        np.testing.assert_array_equal(b.agents.state_dict()[k], v)


def test_train_epoch_reports_l_rsa_only_with_penalty():
    ds = generate_synthetic(SyntheticSpec(items_per_category=12, dim=8), np.random.default_rng(0))
    plain = Trainer(ExperimentConfig(loss="ce", **TINY), ds.dim, 1).train_epoch(ds)
    aux = Trainer(ExperimentConfig(loss="ce_rsa", **TINY), ds.dim, 1).train_epoch(ds)
    assert plain.l_rsa == 0.0
    assert aux.l_rsa > 0.0


def test_evaluate_pairs_counts_both_directions():
    cfg = ExperimentConfig(**TINY)
    tr = Trainer(cfg, 8, 0)
    rec = tr.evaluate_pairs(noise_pairs(10, 8, np.random.default_rng(0)))
    assert rec.split == "noise"
    assert 0.0 <= rec.accuracy <= 1.0


def test_ce_loss_mixed_batch():
    probs = np.array([[1.0, 0.0], [0.5, 0.5]])
    assert ce_loss(probs, [0, 1]).item() == pytest.approx(np.log(2) / 2, abs=1e-12)


def _three_point_sets():
    # inputs: pair (0,1) most similar, (1,2) least; reps: the reverse order
    ang_in = np.array([0.0, 0.3, 1.2])
    ang_rep = np.array([0.0, 1.0, 0.1])
    unit = lambda a: np.column_stack([np.cos(a), np.sin(a)])
    return unit(ang_in), unit(ang_rep)


def test_rsa_penalty_reversed_similarity_structure():
    from refgame import metrics
    x, rep = _three_point_sets()
    assert metrics.rsa(rep, x) == pytest.approx(-1.0)
    # speaker and listener agree with each other but both invert the inputs: 0 + 2 + 2
    penalty = rsa_penalty(rep, rep, x, SoftRankConfig(1e-4)).item()
    assert penalty == pytest.approx(4.0, abs=1e-3)


def test_rsa_penalty_matches_hard_rsa_at_small_strength():
    from refgame import metrics
    rng = np.random.default_rng(6)
    for _ in range(30):
        s, l, x = rng.normal(size=(12, 4)), rng.normal(size=(12, 5)), rng.normal(size=(12, 6))
        hard = 3 - metrics.rsa(s, l) - metrics.rsa(s, x) - metrics.rsa(l, x)
        assert rsa_penalty(s, l, x, SoftRankConfig(1e-4)).item() == pytest.approx(hard, abs=0.03)


def test_policy_term_vanishes_when_reward_equals_baseline():
    logp = ad.parameter(np.array([-0.3, -1.7, -0.2]))
    ent = ad.constant(np.array([0.4, 0.2, 0.6]))
    b = BaselineState()
    b.update(0.7)
    loss, policy, entropy = speaker_policy_loss(logp, ent, np.full(3, 0.7), b, 0.1)
    assert policy.item() == 0.0
    assert loss.item() == pytest.approx(-0.1 * 0.4)


def test_equal_rewards_without_entropy_give_zero_loss_after_first_batch():
    b = BaselineState()
    logp, ent = ad.constant(np.array([-1.0, -2.0])), ad.constant(np.ones(2))
    speaker_policy_loss(logp, ent, np.full(2, 0.3), b, 0.0)
    loss, _, _ = speaker_policy_loss(logp, ent, np.full(2, 0.3), b, 0.0)
    assert loss.item() == 0.0


def test_two_armed_bandit_converges():
    from refgame.agents import Speaker
    from refgame.layers import Adam
    rng = np.random.default_rng(0)
    speaker = Speaker(4, 8, 3, 4, rng)
    opt = Adam(speaker.parameters(), 0.01)
    baseline = BaselineState()
    r_s = ad.constant(rng.normal(size=(32, 8)))
    for _ in range(300):
        msgs, logp, ent = speaker.generate(r_s, 1, training=True, rng=rng)
        rewards = (msgs[:, 0] == 1).astype(float)
        loss, _, _ = speaker_policy_loss(logp, ent, rewards, baseline, 0.0)
        opt.zero_grad()
        ad.backward(loss)
        opt.step()
    with ad.no_grad():
        h = speaker.generator(ad.gather_rows(speaker.bos, np.zeros(32, dtype=np.int64)), r_s)
        p_a = ad.softmax(speaker.output_proj(h)).data[:, 1]
    assert p_a.mean() > 0.95


def test_rewards_carry_no_gradient_into_listener():
    cfg = ExperimentConfig(**TINY)
    ds = generate_synthetic(cfg.synthetic_spec(), np.random.default_rng(0))
    tr = Trainer(cfg, ds.dim, 0)
    inputs = next(epoch_batches(ds, "train", 8, 2, np.random.default_rng(0)))
    round_ = play_round(inputs, tr.agents, cfg.max_len, True, np.random.default_rng(1))
    from refgame.game import per_sample_ce
    rewards = -per_sample_ce(round_.distribution, inputs.target_index).data
    loss, _, _ = speaker_policy_loss(round_.log_probs, round_.entropies, rewards, BaselineState(), 0.1)
    ad.zero_grads(tr.agents.listener.parameters())
    ad.backward(loss)
    assert all((p.grad == 0).all() for p in tr.agents.listener.parameters())


def test_untrained_agents_play_at_chance():
    # a single random init can lean either way; chance level holds over inits
    cfg = ExperimentConfig()
    ds = generate_synthetic(cfg.synthetic_spec(), np.random.default_rng(0))
    hits = []
    for seed in range(10):
        tr = Trainer(cfg, ds.dim, seed)
        inputs = next(epoch_batches(ds, "train", 100, 2, np.random.default_rng(seed)))
        with ad.no_grad():
            r = play_round(inputs, tr.agents, cfg.max_len, False)
        hits.append(r.distribution.data.argmax(axis=1) == inputs.target_index)
    assert abs(np.concatenate(hits).mean() - 0.5) < 0.05
    noise = tr.evaluate_pairs(noise_pairs(200, ds.dim, np.random.default_rng(1)))
    assert abs(noise.accuracy - 0.5) < 0.05


def test_identical_candidates_give_uniform_distribution():
    from refgame.datasets import RoundInputs
    cfg = ExperimentConfig(**TINY)
    tr = Trainer(cfg, 8, 0)
    x = np.random.default_rng(0).normal(size=(4, 8))
    cands = np.repeat(x[:, None, :], 3, axis=1)
    inputs = RoundInputs(np.arange(4), np.zeros((4, 3), int), np.zeros(4, int), x, cands)
    with ad.no_grad():
        dist = play_round(inputs, tr.agents, 3, False).distribution.data
    np.testing.assert_allclose(dist, 1 / 3, atol=1e-12)


def test_zero_learning_rates_leave_parameters_unchanged():
    cfg = ExperimentConfig(**{**TINY, "speaker_lr": 0.0, "listener_lr": 0.0})
    ds = generate_synthetic(cfg.synthetic_spec(), np.random.default_rng(0))
    tr = Trainer(cfg, ds.dim, 0)
    params = tr.agents.speaker.parameters() + tr.agents.listener.parameters()
    before = [p.data.copy() for p in params]
    tr.train_epoch(ds)
    for p, b in zip(params, before):
        assert p.data.tobytes() == b.tobytes()


def test_empty_split_rejected():
    from refgame.datasets import DatasetError, EmbeddingDataset
    ds = EmbeddingDataset(np.ones((4, 8)), np.zeros(4), np.full(4, "validation"))
    with pytest.raises(DatasetError):
        Trainer(ExperimentConfig(**TINY), 8, 0).train_epoch(ds)


def test_evaluate_rsa_matches_metrics_on_dumped_representations():
    from refgame import metrics
    cfg = ExperimentConfig(**TINY)
    ds = generate_synthetic(cfg.synthetic_spec(), np.random.default_rng(0))
    tr = Trainer(cfg, ds.dim, 0)
    tr.train_epoch(ds)
    rec = tr.evaluate(ds)
    items = ds.embeddings[ds.indices("validation")]
    with ad.no_grad():
        r_s = tr.agents.speaker.represent(items, False).data
        r_l = tr.agents.listener.represent(items, False).data
    assert rec.rsa_sl == metrics.rsa(r_s, r_l)
