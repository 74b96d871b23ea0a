"""seqtta: test-time augmentation for sequential recommenders.

Toy-scale GRU / self-attention backbones, nine augmentation operators, an
averaging TTA engine, a group-level operator study with an oracle upper
bound, and a PPO-trained policy that picks one operator per sequence.
"""

from .augment import (ALL_ACTIONS, AugAction, AugmentedView, OperatorParams,
                      action_preset, apply, build_similarity_index)
from .backbones import Backbone, BackboneConfig, train_backbone
from .data import (InteractionDataset, LooSplit, PopulationSpec, SplitResult,
                   SyntheticSpec, generate_synthetic, ingest, k_core_filter,
                   popularity_percentiles, split_leave_one_out)
from .engine import RankingResult, TtaConfig, base_predict, run_fixed_strategy, tta_predict
from .metrics import (MetricsSummary, RankingReport, hr_at_k, ndcg_at_k,
                      summarize, target_rank)
from .policy import (PolicyNet, PolicyState, PpoConfig, RewardConfig,
                     build_state, collect_rollout, combined_reward,
                     dynamic_entropy, macro_reward, ppo_update, rank_reward,
                     run_adaptive, select_action, train_policy)
from .study import (GroupSpec, GroupedReport, group_by_cluster, group_by_length,
                    kmeans_cluster, oracle_report, per_group_operator_table)

__version__ = "0.1.0"
