import pytest
import torch

from posegen.codec import CodecConfig, encode
from posegen.dit import ConditionBundle, DitConfig
from posegen.numerics import Rng
from posegen.synth import DataConfig, make_dataset
from posegen.trainer import TrainConfig, train

torch.set_num_threads(1)

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}

TOY_DIT = DitConfig(L=4, d=32, heads=4)
TOY_TRAIN = dict(steps=200, batch_size=4, peak_lr=1e-3, seed=0)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def tiny_config(**kw) -> DitConfig:
    base = dict(L=2, d=24, heads=4, text_dim=16)
    base.update(kw)
    return DitConfig(**base)


def random_bundle(cfg: DitConfig, f: int = 2, h: int = 4, w: int = 4, seed: int = 0) -> ConditionBundle:
    rng = Rng(seed)
    c = cfg.c
    return ConditionBundle(
        z_vid=rng.normal(c, f, h, w),
        m=torch.zeros(cfg.s, f, h, w),
        z_pose=rng.normal(c, f, h, w),
        z_hand=rng.normal(c, f, h, w),
        z_img=rng.normal(c, 1, h, w),
        caption=torch.tensor(rng.integers(0, cfg.vocab, size=8), dtype=torch.long),
        subject_indices=[2],
    )


@pytest.fixture(scope="session")
def toy_dataset():
    return make_dataset(32, DataConfig(frames=17, height=64, width=64), seed=0)


@pytest.fixture(scope="session")
def toy_models(toy_dataset):
    """Base and stitch checkpoints trained with the desk-scale recipe."""
    codec = CodecConfig(c=TOY_DIT.c, s=TOY_DIT.s)
    base = train(toy_dataset, TrainConfig(role="base", **TOY_TRAIN), TOY_DIT, codec)
    stitch = train(toy_dataset, TrainConfig(role="stitch", **TOY_TRAIN), TOY_DIT, codec)
    return base, stitch
