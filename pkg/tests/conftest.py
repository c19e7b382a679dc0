"""Shared fixtures.

The expensive fixed-seed pipeline runs (synthetic fleet + 20-epoch
pretraining) are session-scoped so the acceptance criteria that examine the
same run (training curve, detection pipeline) pay for it once.
"""

import time

import pytest

from battfault import dataio, model
from battfault.numcore import SeededRng
from battfault.pretrain import PretrainConfig, run_pretrain

FLEET_SEED = 7
SPLIT_SEED = 8
INIT_SEED = 1


@pytest.fixture(scope="session")
def default_fleet():
    """Default synthetic benchmark: 40 vehicles, M=128, D=3, normalized splits."""
    fleet = dataio.synth_fleet(dataio.FleetConfig(), FLEET_SEED)
    train, val, spec = dataio.vehicle_split(fleet, 0.8, SPLIT_SEED)
    stats = dataio.fit_norm(train)
    return {
        "fleet": fleet,
        "train": dataio.apply_norm(train, stats),
        "val": dataio.apply_norm(val, stats),
        "spec": spec,
        "stats": stats,
    }


@pytest.fixture(scope="session")
def pretrain_run(default_fleet):
    """20-epoch fixed-seed pretraining on the default fleet, with timing.

    Also keeps a copy of the untouched random initialization so downstream
    comparisons (pretrained vs random-init encoder) share identical seeds.
    """
    cfg = model.ModelConfig.desk_default()
    params = model.init_params(cfg, SeededRng(INIT_SEED, ("init",)))
    random_params = params.copy()
    t0 = time.monotonic()
    ckpt, history = run_pretrain(default_fleet["train"], default_fleet["val"],
                                 params, cfg, PretrainConfig(epochs=20, seed=INIT_SEED))
    elapsed = time.monotonic() - t0
    return {
        "cfg": cfg,
        "params": params,
        "random_params": random_params,
        "checkpoint": ckpt,
        "history": history,
        "elapsed_s": elapsed,
    }
