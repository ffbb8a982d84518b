"""semsplat: language-embedded 3D Gaussian splatting SLAM.

Joint differentiable rendering of RGB, per-pixel semantic features and depth
from optimizable 3D Gaussians; online RGB-D tracking and mapping; PCA
compression of vision-language embeddings; open-vocabulary text queries over
the reconstructed scene.
"""

from .scene import (CameraIntrinsics, FrameBundle, Gaussian3D, GaussianMap,
                    LossConfig, Pose, PyramidSchedule, activate, split_gaussian)
from .rasterizer import (RenderOutput, Projected2D, project, render,
                         render_backward, reference_render)
from .compressor import (PCAModel, compress, compress_grid, decompress,
                         eval_compression, fit_pca, synthesize_training_set,
                         upsample_bilinear, load_pca, save_pca)
from .losses import (LossBreakdown, loss_color, loss_cossim, loss_depth,
                     loss_depth_expected, total_loss)
from .optim import DensifyConfig, adam_step, densify_and_prune, optimize_window
from .slam import SlamConfig, SlamResult, run_sequence, seed_gaussians, \
    select_keyframe, track
from .query import TextQuery, compress_query, segment_multiclass, similarity_map
from .metrics import EvalReport, ate_rmse, depth_l1, miou_macc, psnr, ssim

__version__ = "0.1.0"
