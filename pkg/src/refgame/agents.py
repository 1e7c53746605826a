"""Speaker and listener agents.

Messages are integer arrays of shape [batch x max_len].  Symbol 0 is EOS;
anything after the first EOS is ignored by the listener and by the metrics,
and the speaker writes zeros there.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import BatchNorm, Embedding, GRUCell, Linear, Module

EOS = 0


def effective_length(message) -> int:
    """Number of symbols before the first EOS."""
    for i, sym in enumerate(message):
        if sym == EOS:
            return i
    return len(message)


def truncate(message) -> tuple[int, ...]:
    """Symbols before the first EOS, as a hashable tuple."""
    return tuple(int(s) for s in message[:effective_length(message)])


class _Perception(Module):
    """Linear projection of frozen input embeddings followed by batch norm."""

    def _init_perception(self, input_dim: int, hidden: int, rng: np.random.Generator):
        self.input_dim = input_dim
        self.hidden = hidden
        self.repr_layer = Linear(input_dim, hidden, rng)
        self.repr_norm = BatchNorm(hidden)

    def represent(self, embeddings, training: bool) -> Tensor:
        x = ad.as_tensor(embeddings)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ad.ShapeError(f"expected embeddings of shape (n, {self.input_dim}), got {x.shape}")
        self.repr_norm.training = training
        return self.repr_norm(self.repr_layer(x))


class Speaker(_Perception):
    def __init__(self, input_dim: int, hidden: int, vocab_size: int, embed_dim: int,
                 rng: np.random.Generator, reembed: bool = False):
        if vocab_size < 2:
            raise ValueError("vocab_size must include EOS plus at least one symbol")
        self._init_perception(input_dim, hidden, rng)
        self.vocab_size = vocab_size
        self.symbol_embed = Embedding(vocab_size, embed_dim, rng)
        self.bos = ad.parameter(rng.uniform(-0.1, 0.1, size=(1, embed_dim)))
        self.generator = GRUCell(embed_dim, hidden, rng)
        self.output_proj = Linear(hidden, vocab_size, rng)
        self.seed_proj = Linear(hidden, hidden, rng) if reembed else None

    def generate(self, r_s: Tensor, max_len: int, training: bool,
                 rng: np.random.Generator | None = None):
        """Spell out one message per row of ``r_s``.

        Training mode samples each symbol; eval mode is greedy.  Returns the
        messages, the summed log-probability of the emitted symbols (EOS
        included) and the mean per-step entropy over emitted steps.
        """
        if training and rng is None:
            raise ValueError("sampling requires an rng")
        batch = r_s.shape[0]
        h = ad.tanh(self.seed_proj(r_s)) if self.seed_proj is not None else r_s
        x = ad.gather_rows(self.bos, np.zeros(batch, dtype=np.int64))
        messages = np.zeros((batch, max_len), dtype=np.int64)
        alive = np.ones(batch)
        steps = np.zeros(batch)
        log_prob = Tensor(np.zeros(batch))
        entropy = Tensor(np.zeros(batch))
        for t in range(max_len):
            if not alive.any():
                break
            h = self.generator(x, h)
            logp = ad.log_softmax(self.output_proj(h))
            if training:
                cdf = np.cumsum(np.exp(logp.data), axis=1)
                u = rng.random(batch)[:, None] * cdf[:, -1:]
                symbols = np.minimum((cdf < u).sum(axis=1), self.vocab_size - 1)
            else:
                symbols = logp.data.argmax(axis=1)
            step_entropy = -(ad.exp(logp) * logp).sum(axis=1)
            log_prob = log_prob + ad.pick(logp, symbols) * alive
            entropy = entropy + step_entropy * alive
            steps += alive
            messages[:, t] = symbols * alive
            alive = alive * (symbols != EOS)
            x = self.symbol_embed(symbols)
        return messages, log_prob, entropy * (1.0 / steps)


class Listener(_Perception):
    def __init__(self, input_dim: int, hidden: int, vocab_size: int, embed_dim: int,
                 rng: np.random.Generator, temperature: float = 0.1):
        if not temperature > 0:
            raise ValueError(f"temperature must be positive, got {temperature}")
        self._init_perception(input_dim, hidden, rng)
        self.vocab_size = vocab_size
        self.temperature = temperature
        self.symbol_embed = Embedding(vocab_size, embed_dim, rng)
        self.encoder = GRUCell(embed_dim, hidden, rng)

    def encode(self, messages) -> Tensor:
        """Final GRU state after reading each message up to and including EOS."""
        messages = np.asarray(messages, dtype=np.int64)
        if messages.ndim != 2:
            raise ValueError(f"messages must be a 2-D array, got shape {messages.shape}")
        if messages.size and (messages.min() < 0 or messages.max() >= self.vocab_size):
            raise IndexError(f"symbol id outside vocabulary of size {self.vocab_size}")
        batch, length = messages.shape
        h = Tensor(np.zeros((batch, self.hidden)))
        alive = np.ones(batch)
        for t in range(length):
            if not alive.any():
                break
            h_new = self.encoder(self.symbol_embed(messages[:, t]), h)
            h = h + (h_new - h) * alive[:, None]
            alive = alive * (messages[:, t] != EOS)
        return h

    def score(self, message_encoding: Tensor, candidate_reprs: Tensor) -> Tensor:
        return listener_score(message_encoding, candidate_reprs, self.temperature)


def listener_score(message_encoding: Tensor, candidate_reprs: Tensor, temperature: float) -> Tensor:
    """Softmax over candidates of cosine(message, candidate) / temperature.

    ``message_encoding`` is [batch x hidden]; ``candidate_reprs`` is
    [batch x n_candidates x hidden].  Zero vectors have cosine 0 with everything.
    """
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    enc = ad.as_tensor(message_encoding)
    cands = ad.as_tensor(candidate_reprs)
    if cands.ndim != 3 or enc.shape != (cands.shape[0], cands.shape[2]):
        raise ad.ShapeError(f"listener_score: incompatible shapes {enc.shape} and {cands.shape}")
    enc_unit = ad.reshape(ad.normalize(enc), (enc.shape[0], 1, enc.shape[1]))
    cosine = (ad.normalize(cands) * enc_unit).sum(axis=-1)
    return ad.softmax(cosine * (1.0 / temperature))


class AgentPair:
    def __init__(self, speaker: Speaker, listener: Listener):
        self.speaker = speaker
        self.listener = listener

    @classmethod
    def create(cls, input_dim: int, vocab_size: int, speaker_hidden: int = 64,
               listener_hidden: int = 64, embed_dim: int = 50, temperature: float = 0.1,
               rng: np.random.Generator | None = None, reembed: bool = False) -> "AgentPair":
        rng = rng if rng is not None else np.random.default_rng()
        speaker = Speaker(input_dim, speaker_hidden, vocab_size, embed_dim, rng, reembed=reembed)
        listener = Listener(input_dim, listener_hidden, vocab_size, embed_dim, rng, temperature)
        return cls(speaker, listener)

    def state_dict(self):
        state = self.speaker.state_dict("speaker.")
        state.update(self.listener.state_dict("listener."))
        return state

    def load_state_dict(self, state) -> None:
        self.speaker.load_state_dict(state, "speaker.")
        self.listener.load_state_dict(state, "listener.")
