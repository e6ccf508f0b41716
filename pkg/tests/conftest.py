import numpy as np
import pytest

from halluguard.bundle import Generation, TrajectoryBundle


def make_generation(rng, t, d, with_states=True):
    return Generation(
        tokens=rng.integers(0, 1000, size=t).astype(np.uint32),
        logprob=-rng.random(t).astype(np.float32),
        step_entropy=rng.random(t).astype(np.float32),
        step_lse=rng.normal(size=t).astype(np.float32),
        text=" ".join(f"tok{i}" for i in range(t)),
        sent_embed=rng.normal(size=d).astype(np.float32),
        step_states=rng.normal(size=(t, d)).astype(np.float32) if with_states else None,
    )


def make_bundle(seed=0, k=4, d=8, t=6, with_states=True, label=None, references=()):
    rng = np.random.default_rng(seed)
    return TrajectoryBundle(
        prompt_id=f"prompt-{seed}",
        prompt_text="what is 2+2?",
        references=list(references),
        generations=[make_generation(rng, t, d, with_states) for _ in range(k)],
        embed_dim=d,
        label=label,
        meta={"backbone": "test", "layer": "1"},
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
