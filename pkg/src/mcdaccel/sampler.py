"""LFSR-based Bernoulli mask generation.

A Fibonacci (external-XOR) shift register emits its least significant
bit each cycle; k registers ANDed together give a drop indicator with
probability 2^-k of being 1, which is how the hardware realizes dyadic
dropout rates without multipliers.  A serial-in-parallel-out stage packs
keep/drop decisions for `sipo_width` filters into mask words, buffered
through a bounded FIFO that models the producer/consumer handoff to the
dropout units.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .rng import derive_seed

# Tap sets yielding maximal sequences (period 2^n - 1).
MAXIMAL_TAPS = {
    4: (4, 3),
    8: (8, 6, 5, 4),
    16: (16, 15, 13, 4),
}

DEFAULT_N_REG = 16
DEFAULT_FIFO_DEPTH = 16


@dataclass(frozen=True)
class LfsrSpec:
    """Register length, feedback taps (1-based, tap n_reg = output bit), seed."""

    n_reg: int
    taps: tuple[int, ...]
    seed: int

    def __post_init__(self):
        if self.n_reg < 2:
            raise ValueError(f"n_reg must be >= 2, got {self.n_reg}")
        taps = tuple(sorted(set(int(t) for t in self.taps), reverse=True))
        if not taps:
            raise ValueError("at least one feedback tap is required")
        if taps[0] > self.n_reg or taps[-1] < 1:
            raise ValueError(f"taps must lie in 1..{self.n_reg}, got {self.taps}")
        object.__setattr__(self, "taps", taps)
        if not (0 < self.seed < (1 << self.n_reg)):
            # all-zero state is absorbing for XOR feedback
            raise ValueError(f"seed must be a nonzero {self.n_reg}-bit value, got {self.seed}")

    @property
    def max_sequence_length(self) -> int:
        """Longest possible period: every nonzero state visited once."""
        return (1 << self.n_reg) - 1


class Lfsr:
    """Fibonacci LFSR; state bit 0 is the output end, bit n_reg-1 the input end."""

    def __init__(self, spec: LfsrSpec):
        self.spec = spec
        self.state = spec.seed
        # tap t reads state bit (n_reg - t): tap n_reg is the LSB
        self._shifts = tuple(spec.n_reg - t for t in spec.taps)
        self._top = spec.n_reg - 1

    def step(self) -> int:
        """Advance one cycle; returns the emitted bit (pre-shift LSB)."""
        s = self.state
        out = s & 1
        fb = 0
        for sh in self._shifts:
            fb ^= s >> sh
        self.state = (s >> 1) | ((fb & 1) << self._top)
        return out

    def step_many(self, n: int) -> list[int]:
        """n successive output bits; the loop is local-variable tight for speed."""
        s = self.state
        shifts = self._shifts
        top = self._top
        out = []
        append = out.append
        for _ in range(n):
            append(s & 1)
            fb = 0
            for sh in shifts:
                fb ^= s >> sh
            s = (s >> 1) | ((fb & 1) << top)
        self.state = s
        return out


def enumerate_period(spec: LfsrSpec, limit: int | None = None) -> tuple[int, list[int]]:
    """Step an LFSR until the seed state recurs.

    Returns (period, visited states in order).  `limit` bounds the walk
    (default: one full state space) so a non-maximal tap set terminates.
    """
    if limit is None:
        limit = 1 << spec.n_reg
    reg = Lfsr(spec)
    states = []
    for i in range(limit):
        states.append(reg.state)
        reg.step()
        if reg.state == spec.seed:
            return i + 1, states
    raise RuntimeError(f"no return to seed within {limit} steps")


def chains_for_drop_prob(p: float) -> int:
    """Number of ANDed chains realizing drop probability p; p must be 2^-k."""
    if not (0.0 < p < 1.0):
        raise ValueError(f"drop probability must lie in (0, 1), got {p}")
    k = round(math.log2(1.0 / p))
    if k < 1 or 2.0 ** -k != p:
        raise ValueError(f"drop probability must be 2^-k for integer k >= 1, got {p}")
    return k


class FifoOverflowError(RuntimeError):
    """Producer enqueued onto a full mask FIFO."""

    def __init__(self, capacity: int):
        super().__init__(f"mask FIFO overflow: occupancy {capacity} of {capacity}")
        self.occupancy = capacity
        self.capacity = capacity


@dataclass
class MaskWord:
    """Keep/drop decisions for one group of sipo_width filters.

    bits[j] = 1 keeps filter j, 0 drops it.  `used` marks how many of the
    bits map to real filters; trailing bits of a ragged final group are
    generated (the hardware clocks them out regardless) but unused.
    """

    bits: tuple[int, ...]
    used: int


class BernoulliSampler:
    """k ANDed LFSR chains feeding a SIPO stage and a bounded FIFO.

    Chains share the tap set and get distinct nonzero seeds expanded from
    the user seed, so the whole mask stream is a pure function of
    (seed, k, sipo_width, n_reg, taps).
    """

    def __init__(self, k: int, sipo_width: int, fifo_depth: int = DEFAULT_FIFO_DEPTH,
                 seed: int = 0, n_reg: int = DEFAULT_N_REG, taps: tuple[int, ...] | None = None):
        if k < 1:
            raise ValueError(f"k must be >= 1 (k = 0 would mean p_drop = 1), got {k}")
        if sipo_width < 1:
            raise ValueError(f"sipo_width must be >= 1, got {sipo_width}")
        if fifo_depth < 1:
            raise ValueError(f"fifo_depth must be >= 1, got {fifo_depth}")
        if taps is None:
            if n_reg not in MAXIMAL_TAPS:
                raise ValueError(f"no default taps for n_reg = {n_reg}; pass taps explicitly")
            taps = MAXIMAL_TAPS[n_reg]
        self.k = k
        self.sipo_width = sipo_width
        self.fifo_depth = fifo_depth
        self.seed = seed
        self.chains = [Lfsr(LfsrSpec(n_reg, taps, s)) for s in expand_seeds(seed, k, n_reg)]
        self.bits_drawn = 0
        self._fifo: list[MaskWord] = []

    @property
    def drop_prob(self) -> float:
        return 2.0 ** -self.k

    def draw_drop_bit(self) -> int:
        """AND of one step of every chain: 1 = drop, 0 = keep."""
        bit = 1
        for chain in self.chains:
            bit &= chain.step()
        self.bits_drawn += 1
        return bit

    def _draw_keep_bits(self, n: int) -> list[int]:
        if self.k == 1:
            drops = self.chains[0].step_many(n)
        else:
            drops = self.chains[0].step_many(n)
            for chain in self.chains[1:]:
                other = chain.step_many(n)
                drops = [a & b for a, b in zip(drops, other)]
        self.bits_drawn += n
        return [1 - b for b in drops]

    # FIFO handoff.  produce_word/consume_word expose the two ends for
    # pipeline-order tests; fill_mask_word runs the normal lockstep flow.

    def produce_word(self, used: int | None = None) -> None:
        if len(self._fifo) >= self.fifo_depth:
            raise FifoOverflowError(self.fifo_depth)
        bits = tuple(self._draw_keep_bits(self.sipo_width))
        self._fifo.append(MaskWord(bits, self.sipo_width if used is None else used))

    def consume_word(self) -> MaskWord:
        if not self._fifo:
            raise RuntimeError("mask FIFO underflow: consume on empty FIFO")
        return self._fifo.pop(0)

    @property
    def fifo_occupancy(self) -> int:
        return len(self._fifo)

    def fill_mask_word(self, used: int | None = None) -> MaskWord:
        self.produce_word(used)
        return self.consume_word()

    def mask_stream_for_layer(self, filters: int) -> list[MaskWord]:
        """ceil(filters / sipo_width) words covering one layer's filters.

        The final word's trailing bits past the filter count are drawn but
        marked unused.
        """
        if filters < 1:
            raise ValueError(f"filters must be >= 1, got {filters}")
        n_words = -(-filters // self.sipo_width)
        words = []
        for i in range(n_words):
            remaining = filters - i * self.sipo_width
            words.append(self.fill_mask_word(used=min(remaining, self.sipo_width)))
        return words


def expand_seeds(seed: int, k: int, n_reg: int) -> list[int]:
    """k pairwise-distinct nonzero n_reg-bit seeds from one user seed."""
    space = (1 << n_reg) - 1
    if k > space:
        raise ValueError(f"cannot draw {k} distinct nonzero {n_reg}-bit seeds")
    seeds: list[int] = []
    counter = 0
    while len(seeds) < k:
        s = derive_seed(seed, len(seeds), counter) % space + 1
        if s in seeds:
            counter += 1
            continue
        seeds.append(s)
        counter = 0
    return seeds


class ConstantMaskSampler:
    """Test/debug stand-in emitting all-keep or all-drop words.

    Mirrors the BernoulliSampler surface the engine touches so forced-mask
    behaviour (determinism, bias-only logits) can be pinned down exactly.
    """

    def __init__(self, sipo_width: int, keep: bool = True):
        self.sipo_width = sipo_width
        self.keep = keep
        self.bits_drawn = 0

    def mask_stream_for_layer(self, filters: int) -> list[MaskWord]:
        n_words = -(-filters // self.sipo_width)
        bit = 1 if self.keep else 0
        words = []
        for i in range(n_words):
            remaining = filters - i * self.sipo_width
            words.append(MaskWord((bit,) * self.sipo_width, min(remaining, self.sipo_width)))
            self.bits_drawn += self.sipo_width
        return words
