"""Probabilistic blood-work trajectory forecasting and progression annotation.

The package pairs a generative forecaster (an LSTM history encoder
conditioning a Gaussian-Bernoulli restricted Boltzmann machine, trained
with contrastive divergence and sampled with Gibbs chains) with a small
LSTM classifier that flags progression events, plus the preprocessing,
synthetic-cohort and cross-validation machinery to exercise both end to
end.
"""

__version__ = "0.1.0"

from .annotator import (
    ANNOTATION_FEATURES,
    AnnotatorParams,
    AnnotatorTrainConfig,
    ThresholdCalibration,
    annotate,
    calibrate_threshold,
    derive_feature_matrix,
    derive_features,
    train_annotator,
    upsample_balance,
)
from .cohort import (
    FEATURES,
    Cohort,
    CohortError,
    FoldAssignment,
    LabPanel,
    PatientRecord,
    Visit,
    align_visits,
    load_cohort,
    split_folds,
    write_cohort,
)
from .crbm import (
    ConditioningNets,
    CrbmCond,
    GibbsChainConfig,
    cd_step,
    condition,
    free_energy,
    gibbs_sample,
    hidden_given_visible,
    visible_given_hidden,
)
from .forecaster import (
    ForecastDistribution,
    ForecasterParams,
    TrainConfig,
    forecast_next,
    forecast_trajectory,
    make_training_pairs,
    train_forecaster,
)
from .metrics import (
    HorizonGrid,
    LinearFit,
    RocSummary,
    auprc,
    auroc,
    combined_pipeline_eval,
    linear_fit,
    moment_comparison,
    pearson_r,
    sens_spec,
)
from .nn import (
    AdamW,
    AdamWConfig,
    DenseParams,
    LstmParams,
    LstmState,
    bce_loss,
    grad_check,
    lstm_forward,
    lstm_step,
    softmax,
)
from .pipeline import ReportBundle, run_cv
from .preprocess import (
    PowerTransform,
    apply_transform,
    fit_power_transform,
    impute_cohort,
    impute_locf,
    invert_transform,
    qq_points,
)
from .synth import (
    CLINICAL_CROSS_CORR,
    SynthConfig,
    empirical_moments,
    generate,
    synthesize_cohort,
)
