from .combine import PredictionMap, late_overlay, late_proportional, occupation_weights
from .networks import (
    LateOverlayNet,
    LateProportionalNet,
    MidNet,
    Network,
    SingleNet,
    build_network,
    init_scratch,
    network_from_checkpoint,
)
from .spec import (
    TABLE_APPROACHES,
    FusionSpec,
    Hyperparams,
    default_grid,
    enumerate_grid,
    toy_fcn_layers,
)
from .training import (
    Sample,
    TrainingDiverged,
    TrainResult,
    grid_search,
    make_sample,
    modality_input,
    new_network,
    predict,
    train,
)
from .transfer import TransferError, init_transfer

__all__ = [
    "PredictionMap", "late_overlay", "late_proportional", "occupation_weights",
    "LateOverlayNet", "LateProportionalNet", "MidNet", "Network", "SingleNet",
    "build_network", "init_scratch", "network_from_checkpoint",
    "TABLE_APPROACHES", "FusionSpec", "Hyperparams", "default_grid", "enumerate_grid", "toy_fcn_layers",
    "Sample", "TrainingDiverged", "TrainResult", "grid_search", "make_sample", "modality_input",
    "new_network", "predict", "train",
    "TransferError", "init_transfer",
]
