"""The referential game: rounds, losses, REINFORCE updates and the epoch loop."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import metrics
from .agents import AgentPair
from .autodiff import Tensor
from .config import ExperimentConfig
from .datasets import (EmbeddingDataset, FixedPairSet, RoundInputs, epoch_batches)
from .diffrank import SoftRankConfig, soft_spearman
from .layers import Adam
from .metrics import MetricsRecord

PROB_FLOOR = 1e-12


@dataclass
class RoundBatch:
    inputs: RoundInputs
    messages: np.ndarray
    distribution: Tensor      # [batch x n_candidates]
    r_s: Tensor               # speaker representations of the targets
    r_l_targets: Tensor       # listener representations of the targets
    log_probs: Tensor
    entropies: Tensor

    @property
    def target_index(self) -> np.ndarray:
        return self.inputs.target_index


@dataclass
class LossReport:
    ce: float
    l_rsa: float
    speaker_policy_loss: float
    entropy_bonus: float
    total: float


class BaselineState:
    """Running arithmetic mean of the batch-mean rewards seen so far."""

    def __init__(self):
        self.total = 0.0
        self.count = 0

    @property
    def mean(self) -> float:
        return self.total / self.count if self.count else 0.0

    def update(self, value: float) -> None:
        self.total += float(value)
        self.count += 1


def play_round(inputs: RoundInputs, agents: AgentPair, max_len: int, training: bool,
               rng: np.random.Generator | None = None) -> RoundBatch:
    batch, n_cand, dim = inputs.candidate_embeddings.shape
    r_s = agents.speaker.represent(inputs.target_embeddings, training)
    messages, log_probs, entropies = agents.speaker.generate(r_s, max_len, training, rng)
    flat = agents.listener.represent(inputs.candidate_embeddings.reshape(batch * n_cand, dim), training)
    cand_reprs = ad.reshape(flat, (batch, n_cand, flat.shape[1]))
    encoding = agents.listener.encode(messages)
    distribution = agents.listener.score(encoding, cand_reprs)
    r_l_targets = cand_reprs[np.arange(batch), inputs.target_index]
    return RoundBatch(inputs, messages, distribution, r_s, r_l_targets, log_probs, entropies)


def per_sample_ce(distribution: Tensor, target_index) -> Tensor:
    return -ad.log(ad.pick(distribution, target_index))


def ce_loss(distribution, target_index) -> Tensor:
    """Mean negative log-probability of the target (probabilities floored at 1e-12)."""
    return per_sample_ce(ad.as_tensor(distribution), target_index).mean()


def _similarities(reprs: Tensor) -> Tensor:
    unit = ad.normalize(reprs)
    i, j = np.triu_indices(reprs.shape[0], k=1)
    return (unit @ unit.T)[i, j]


def rsa_terms(r_s, r_l, inputs, cfg: SoftRankConfig = SoftRankConfig()) -> tuple[Tensor, Tensor, Tensor]:
    """Soft RSA between speaker/listener, speaker/input and listener/input."""
    r_s, r_l = ad.as_tensor(r_s), ad.as_tensor(r_l)
    if r_s.shape[0] < 3:
        raise ValueError(f"rsa_penalty: need at least 3 items, got {r_s.shape[0]}")
    if r_l.shape[0] != r_s.shape[0] or len(inputs) != r_s.shape[0]:
        raise ValueError("rsa_penalty: representation sets must describe the same items")
    sim_s = _similarities(r_s)
    sim_l = _similarities(r_l)
    sim_i = Tensor(metrics.pairwise_cosine(inputs))
    return (soft_spearman(sim_s, sim_l, cfg), soft_spearman(sim_s, sim_i, cfg),
            soft_spearman(sim_l, sim_i, cfg))


def rsa_penalty(r_s, r_l, inputs, cfg: SoftRankConfig = SoftRankConfig()) -> Tensor:
    """(1 - RSA_sl) + (1 - RSA_si) + (1 - RSA_li), differentiable in r_s and r_l."""
    sl, si, li = rsa_terms(r_s, r_l, inputs, cfg)
    return 3.0 - (sl + si + li)


def speaker_policy_loss(log_probs: Tensor, entropies: Tensor, rewards: np.ndarray,
                        baseline: BaselineState, entropy_coef: float):
    """REINFORCE with a running-mean baseline, minus an entropy bonus.

    Returns ``(loss, policy_term, entropy_term)`` where
    ``loss = policy_term - entropy_coef * entropy_term``.  The baseline is
    updated with this batch's mean reward after it has been used.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    advantage = rewards - baseline.mean
    policy = (log_probs * -advantage).mean()
    entropy = entropies.mean()
    baseline.update(rewards.mean())
    return policy - entropy * entropy_coef, policy, entropy


def _batch_rsa(round_: RoundBatch) -> tuple[float, float, float]:
    x = round_.inputs.target_embeddings
    s, l = round_.r_s.data, round_.r_l_targets.data
    return metrics.rsa(s, l), metrics.rsa(s, x), metrics.rsa(l, x)


class Trainer:
    """Owns one agent pair, its optimizers, baseline and random streams.

    All randomness derives from ``seed``: parameter initialization, batch
    composition and message sampling use independent streams, so two
    trainers with the same seed start identical regardless of loss type.
    """

    def __init__(self, config: ExperimentConfig, input_dim: int, seed: int):
        self.config = config
        self.seed = seed
        init_ss, data_ss, sample_ss = np.random.SeedSequence(seed).spawn(3)
        self.agents = AgentPair.create(
            input_dim, config.vocab_size, config.speaker_hidden, config.listener_hidden,
            config.embed_dim, config.temperature, np.random.default_rng(init_ss), config.reembed)
        self.data_rng = np.random.default_rng(data_ss)
        self.sample_rng = np.random.default_rng(sample_ss)
        self.speaker_opt = Adam(self.agents.speaker.parameters(), config.speaker_lr)
        self.listener_opt = Adam(self.agents.listener.parameters(), config.listener_lr)
        self.baseline = BaselineState()
        self.softrank = config.softrank()
        self.epoch = 0

    def train_step(self, inputs: RoundInputs) -> tuple[RoundBatch, LossReport]:
        cfg = self.config
        round_ = play_round(inputs, self.agents, cfg.max_len, True, self.sample_rng)
        sample_ce = per_sample_ce(round_.distribution, inputs.target_index)
        ce = sample_ce.mean()
        if cfg.reward == "ce":
            rewards = -sample_ce.data
        else:
            rewards = (round_.distribution.data.argmax(axis=1) == inputs.target_index).astype(float)
        policy_total, policy, entropy = speaker_policy_loss(
            round_.log_probs, round_.entropies, rewards, self.baseline, cfg.entropy_coef)
        total = ce + policy_total
        l_rsa = 0.0
        if cfg.loss == "ce_rsa":
            penalty = rsa_penalty(round_.r_s, round_.r_l_targets, inputs.target_embeddings, self.softrank)
            total = total + penalty
            l_rsa = penalty.item()
        self.speaker_opt.zero_grad()
        self.listener_opt.zero_grad()
        ad.backward(total)
        self.speaker_opt.step()
        self.listener_opt.step()
        report = LossReport(ce.item(), l_rsa, policy.item(), entropy.item(), total.item())
        return round_, report

    def train_epoch(self, ds: EmbeddingDataset) -> MetricsRecord:
        """One pass over the training split with fresh distractors per batch."""
        cfg = self.config
        weights, accs, ces, penalties, rsas = [], [], [], [], []
        targets, messages = [], []
        for inputs in epoch_batches(ds, "train", cfg.batch_size, cfg.n_candidates, self.data_rng):
            round_, report = self.train_step(inputs)
            weights.append(inputs.batch_size)
            accs.append(metrics.accuracy(round_.distribution.data, inputs.target_index))
            ces.append(report.ce)
            penalties.append(report.l_rsa)
            rsas.append(_batch_rsa(round_))
            targets.append(inputs.target_embeddings)
            messages.append(round_.messages)
        if not weights:
            raise ValueError("training split produced no batches")
        self.epoch += 1
        w = np.asarray(weights, dtype=float)
        sl, si, li = np.average(np.asarray(rsas), axis=0, weights=w)
        all_messages = np.vstack(messages)
        return MetricsRecord(
            epoch=self.epoch, split="train",
            accuracy=float(np.average(accs, weights=w)),
            rsa_sl=float(sl), rsa_si=float(si), rsa_li=float(li),
            topsim=metrics.topsim(np.vstack(targets), all_messages, cfg.topsim_metric),
            unique_messages=metrics.unique_messages(all_messages),
            ce=float(np.average(ces, weights=w)),
            l_rsa=float(np.average(penalties, weights=w)))

    def _eval_rng(self, split: str) -> np.random.Generator:
        return np.random.default_rng([self.seed, sum(map(ord, split))])

    def _score_rounds(self, batches, items: np.ndarray, split: str) -> MetricsRecord:
        cfg = self.config
        probs, targets = [], []
        with ad.no_grad():
            for inputs in batches:
                round_ = play_round(inputs, self.agents, cfg.max_len, training=False)
                probs.append(round_.distribution.data)
                targets.append(inputs.target_index)
            r_s = self.agents.speaker.represent(items, training=False)
            r_l = self.agents.listener.represent(items, training=False)
            messages, _, _ = self.agents.speaker.generate(r_s, cfg.max_len, training=False)
            # diagnostic under either loss, so matched runs report comparable rows
            l_rsa = rsa_penalty(r_s, r_l, items, self.softrank).item()
        probs = np.vstack(probs)
        targets = np.concatenate(targets)
        p_target = np.maximum(probs[np.arange(len(targets)), targets], PROB_FLOOR)
        return MetricsRecord(
            epoch=self.epoch, split=split,
            accuracy=metrics.accuracy(probs, targets),
            rsa_sl=metrics.rsa(r_s.data, r_l.data),
            rsa_si=metrics.rsa(r_s.data, items),
            rsa_li=metrics.rsa(r_l.data, items),
            topsim=metrics.topsim(items, messages, cfg.topsim_metric),
            unique_messages=metrics.unique_messages(messages),
            ce=float(np.mean(-np.log(p_target))),
            l_rsa=l_rsa)

    def evaluate(self, ds: EmbeddingDataset, split: str = "validation") -> MetricsRecord:
        """Greedy, batch-norm-frozen pass over a split; never updates parameters.

        Distractors come from a generator keyed on (seed, split), so repeated
        evaluations see the same rounds.
        """
        rng = self._eval_rng(split)
        batches = epoch_batches(ds, split, self.config.batch_size, self.config.n_candidates,
                                rng, shuffle=False, min_batch=1)
        return self._score_rounds(batches, ds.embeddings[ds.indices(split)], split)

    def evaluate_pairs(self, pairs: FixedPairSet, both_directions: bool = True) -> MetricsRecord:
        rounds = pairs.rounds(both_directions)
        return self._score_rounds([rounds], pairs.items(), pairs.name)

    def messages_for(self, embeddings: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            r_s = self.agents.speaker.represent(embeddings, training=False)
            messages, _, _ = self.agents.speaker.generate(r_s, self.config.max_len, training=False)
        return messages
