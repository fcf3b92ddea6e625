import pytest

from repdiff.data import RingMixture
from repdiff.diffusion import LossConfig
from repdiff.representation import Encoder, LevelSpec, SyntheticModality
from repdiff.schedules import Curriculum, make_noise_schedule, uniform_weights
from repdiff.train import EvalSettings, Setup, TrainSettings


def tiny_setup(epochs=3, n_train=256, batch=64, width=16, **loss) -> Setup:
    ring = RingMixture()
    ex = Encoder("class-prototype", 8, 2, seed=11, prototypes=ring.means)
    ey = Encoder("random-feature", 4, 3, seed=12)
    levels = (LevelSpec("x", 1, encoder=ex), LevelSpec("y", 3, modality=SyntheticModality(2, 3, 0.1, ey, seed=13)))
    return Setup(
        ring=ring,
        n_train=n_train,
        data_seed=1,
        ns=make_noise_schedule("linear", 20, 1e-3, 0.2),
        ws=uniform_weights(20),
        levels=levels,
        loss=LossConfig(**loss),
        alpha_c=Curriculum("linear-phase-in", warmup=2),
        beta_c=Curriculum("constant"),
        train=TrainSettings(epochs=epochs, batch_size=batch),
        eval=EvalSettings(n_samples=256, projections=64, energy_points=256),
        depth=4,
        width=width,
        temb_dim=8,
        inject_layer=2,
        head_hidden=8,
    )


@pytest.fixture
def setup():
    return tiny_setup()
