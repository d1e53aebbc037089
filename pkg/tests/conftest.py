from __future__ import annotations

import random

from hypothesis import HealthCheck, settings

from stopgames.instances import InstanceSpec, random_profile, random_tree

settings.register_profile("stopgames", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("stopgames")


def tree_and_profile(seed: int, depth: int = 3, k: int = 2):
    rng = random.Random(seed)
    t, _ = random_tree(rng, InstanceSpec(kind="tree", depth=depth, k=k))
    return t, random_profile(rng, t)
