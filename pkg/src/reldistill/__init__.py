"""Progressive distillation of diffusion denoisers with relational feature losses."""

from .schedule import (COSINE, NoiseSchedule, SingularTargetError, ddim_sample, ddim_step,
                       ddim_update, forward_diffuse, pd_teacher_target, step_grid)
from .features import (FeatureExtractor, ProjectionHead, extract, flatten_map, l2_normalize_rows,
                       project_student, unflatten_map)
from .losses import (LossWeights, cfd_loss, ii_p2p_loss, is_p2p_loss, kl_divergence, m_p2p_loss,
                     pd_loss, rdd_loss, softmax_temp, spatial_relation)
from .memory import PixelQueue, QueueNotReadyError
from .models import ConvClassifier, UNet
from .trainer import (DistillConfig, StageReport, TrainConfig, TrainingDivergedError, distill_stage,
                      pretrain_classifier, progressive_distill, stage_plan, train_base)
from .evaluation import (FeatureStats, collect_stats, evaluate_model, frechet_distance,
                         inception_score)

__version__ = "0.1.0"
