"""Federated learning with Bayesian-inference-based adaptive row dropout.

The package simulates communication-efficient federated training where
each client drops weight rows guided by its local loss trend, uploads only
the surviving rows plus a pattern bitset, and the server reconstructs and
aggregates.  Baseline dropout strategies, a top-k update sparsifier, exact
byte accounting, and a deterministic report pipeline are included.
"""

from .bayes import (
    VariationalParams,
    kl_regularizer,
    posterior_variance,
    sample_weights,
    tempered_loss,
)
from .datasets import (
    Dataset,
    Partition,
    load_idx,
    partition_iid,
    partition_noniid,
    save_idx,
    synth_images,
    synth_sequences,
    synth_teacher,
)
from .estimator import FedBIADClassifier, FedBIADRegressor
from .federation import (
    FedConfig,
    FederatedTrainer,
    TimingModel,
    VariationalSettings,
    aggregate,
    client_update,
    mc_generalization_error,
    run_training,
    select_clients,
)
from .metrics import (
    LinkModel,
    RoundReport,
    emit_reports,
    epsilon_bound,
    save_ratio,
    tta_estimate,
)
from .nn import (
    GradientSet,
    ModelParams,
    ModelSpec,
    backward,
    finite_diff_grad,
    init_params,
    mlp_forward,
    rnn_forward,
)
from .patterns import (
    DroppingPattern,
    LossWindow,
    RowLayout,
    WeightScores,
    adapt_pattern,
    loss_gap,
    sample_pattern,
    stage_two_pattern,
    update_scores,
)
from .strategies import (
    STRATEGIES,
    TopKConfig,
    magnitude_prune_pattern,
    ordered_drop_pattern,
    random_drop_pattern,
    topk_sparsify,
)
from .wire import CommLedger, SparseUpdate, deserialize, serialize, upload_bytes

__version__ = "0.1.0"
