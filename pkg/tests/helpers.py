"""Small, fast experiment builders shared by the harness and CLI tests."""
from memda.config import TrainConfig, build_variant
from memda.data import DriftConfig, generate_synthetic_drift
from memda.harness import prepare_data

SMALL_TRAIN = dict(
    alpha=12, K=2, C_e=16, L=4, D=8, N_s=3, encoder_width=16, encoder_depth=2,
    decoder_hidden=32, batch_size=16, max_epochs=3, patience=50,
)
SMALL_SYNTHETIC = dict(n_nodes=3, n_days=12, drift_time=8 * 24, magnitude=0.5, day_variability=0.3, seed=0)


def small_series(**overrides):
    return generate_synthetic_drift(DriftConfig(**{**SMALL_SYNTHETIC, **overrides}))


def small_data(series=None, K=2, val_fraction=0.25):
    series = series if series is not None else small_series()
    return prepare_data(series, 8 * 24, val_fraction, alpha=12, K=K)


def small_config(**overrides):
    return TrainConfig(**{**SMALL_TRAIN, **overrides})


def small_model(config, in_channels=1):
    return build_variant(config, in_channels)
