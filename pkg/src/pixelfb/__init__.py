"""Learning linear pixels-to-torques output-feedback policies on a cartpole.

A privileged encoder LQG teacher controls the simulated rig, demonstration
data is collected, and a pixel-based Luenberger observer is fit by (plain,
L1-regularized, or spectrally constrained) linear least squares, then
evaluated in closed loop. A Koopman-lifted bilinear observer extends the
same recipe to swing-up trajectory tracking.
"""

from .cartpole import (
    DT,
    U_MAX,
    CartpoleParams,
    CartpoleState,
    NoiseConfig,
    clamp_force,
    continuous_dynamics,
    encoder_measure,
    linearize,
    sample_true_params,
    step,
    step_true,
    wrap_angle,
)
from .camera import CameraConfig, PixelObservation, gaussian_blur, observe, otsu_threshold, render
from .lincontrol import (
    LinearModel,
    LqrWeights,
    TeacherPolicy,
    closed_loop_stable,
    kalman_gain,
    observer_stable,
    solve_dare,
    synthesize_teacher,
    teacher_step,
    tvlqr,
)
from .learning import (
    DemoDataset,
    DemoTrajectory,
    ObserverParams,
    RegressionProblem,
    assemble,
    fit_lasso,
    fit_lls,
    fit_stable,
    student_step,
)
from .koopman import (
    KoopmanBasis,
    KoopmanObserverParams,
    assemble_koopman,
    fit_koopman,
    koopman_student_step,
    lift,
    unlift,
)
from .trajopt import IlqrWeights, ReferenceTrajectory, ilqr, track_rollout
from .harness import EvalReport, ExperimentConfig, collect, evaluate, heatmap, sweep, swingup, train

__version__ = "0.1.0"
