"""Task-vector model merging with Fisher weighting and Bayesian-optimized
coefficients, exercised end to end on small self-trained classifiers."""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    ContainerError,
    DegenerateBasisError,
    DivergenceError,
    LayoutError,
    NumericalError,
)
from .params import (
    Checkpoint,
    ParamVector,
    SegmentLayout,
    axpy_into_pretrained,
    load_checkpoint,
    save_checkpoint,
    task_vector,
)
from .toymodels import (
    ClassifierSpec,
    Dataset,
    SyntheticTask,
    TrainConfig,
    conflict_suite,
    finetune,
    forward,
    generate_task,
    multitask_finetune,
    nll_and_grad,
    pretrain_shared_init,
)
from .fisher import (
    FisherDiagonal,
    FisherFull,
    empirical_fisher_diag,
    empirical_fisher_full,
    fisher_at_scaled,
)
from .merge import (
    CoefficientVector,
    ImportanceWeights,
    MergeInputs,
    dare_preprocess,
    merge_averaging,
    merge_df,
    merge_fisher,
    merge_fisher_full,
    merge_task_arithmetic,
    ties_merge,
    ties_preprocess,
    unified_merge,
)
from .bayesopt import (
    BOConfig,
    CoefficientPoint,
    ExpectedImprovement,
    GPState,
    Kernel,
    TrajectoryPoint,
    UpperConfidenceBound,
    acquisition_value,
    gp_fit,
    gp_posterior,
    optimize,
    propose_next,
)
from .harness import (
    EvalContext,
    EvalReport,
    LandscapeGrid,
    ablate,
    evaluate,
    grid_search_ta,
    landscape,
    make_fisher_provider,
    objective_fn,
)

__all__ = [name for name in dir() if not name.startswith("_")]
