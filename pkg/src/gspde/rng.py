"""Counter-based random number streams.

Every stochastic object in the package draws from a Philox generator keyed
by ``(master_seed, domain, *indices)``.  Streams with distinct keys never
overlap, so per-path substreams can be generated in any order (or in
parallel) and still reproduce bit-for-bit.
"""

import numpy as np

# Domain tags keep streams disjoint even when the same integer seed is
# reused for different purposes (e.g. seed_W == seed_G).
DOMAIN_ENSEMBLE = 1
DOMAIN_WIENER = 2
DOMAIN_INITIAL = 3

_DOMAINS = {
    "ensemble": DOMAIN_ENSEMBLE,
    "wiener": DOMAIN_WIENER,
    "initial": DOMAIN_INITIAL,
}


def substream(seed: int, domain: str, *indices: int) -> np.random.Generator:
    """Return the generator for stream ``(seed, domain, *indices)``."""
    if domain not in _DOMAINS:
        raise ValueError(f"unknown stream domain {domain!r}")
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(_DOMAINS[domain], *indices))
    return np.random.Generator(np.random.Philox(ss))


def child_seed(seed: int, *indices: int) -> int:
    """Derive a child integer seed, e.g. one per Monte Carlo run."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(indices))
    return int(ss.generate_state(1, np.uint64)[0])
