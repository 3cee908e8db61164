"""Real-time battery state-of-health estimation from partial discharge cycles.

Cycles of different lengths are synchronized to a reference cycle with an
energy-aware time warping, the time steps that vary most over a battery's
life are kept, encoded on a value grid and regressed to capacity with an
LSTM.  Online, a running cycle is completed with the future of its nearest
training cycle so an estimate exists at every sample.
"""

from .dataset import (
    BatteryRecord,
    CycleTrajectory,
    SplitSpec,
    SyntheticConfig,
    generate_synthetic,
    parse_battery,
    split,
    write_battery,
)
from .errors import GridMismatchWarning, SohTwinError
from .importance import (
    EncodedCycle,
    GridSpec,
    ImportanceProfile,
    analyse_importance,
    fit_grid,
    grid_encode,
    importance_profile,
)
from .realtime import (
    OnlinePrefix,
    OnlineSession,
    RealtimeEstimate,
    estimate_at,
    match_and_reconstruct,
    prefix_similarity,
    stream_cycle,
)
from .regressor import ModelParameters, TrainConfig, evaluate, forward, gradient_check, load, save, train
from .warp import (
    EdtwSettings,
    EdtwSolution,
    SyncedBattery,
    WarpPath,
    dtw_align,
    edtw_solve,
    synchronize_battery,
    synchronize_cycle,
)

__version__ = "0.1.0"
