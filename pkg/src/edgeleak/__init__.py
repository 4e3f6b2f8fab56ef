"""Edge-privacy attacks on GCNs behind a query-only API, and edge-DP defenses."""

from .dpgraph import DpBudget, dp_train_and_infer, edgerand, edgerand_s_from_eps, lapgraph, precision_bound
from .gcn import Blackbox, GcnModel, TrainConfig, blackbox_query, forward, grad_check, train
from .graph import (
    Dataset,
    NormKind,
    SparseGraph,
    Stratum,
    degree_stratified_sample,
    generate_er,
    generate_sbm,
    normalize,
)
from .linkteller import AttackReport, influence_matrix, linkteller_attack, lsa2_attack, random_attack
from .metrics import PairGroundTruth, attack_auc, attack_metrics, utility_report

__version__ = "0.1.0"
