from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    model_config = SettingsConfigDict(
        env_file=".env", env_prefix="ASL_", extra="ignore"
    )

    # Tool
    TOOL_VERSION: str = "1.0.0"
    LOG_LEVEL: str = "INFO"
    THREADS: int = 1

    # Local contrast normalization
    LCN_RADIUS: int = 4  # 9x9 patch
    LCN_ETA: float = 1e-3

    # Adaptive support weights
    ASW_HALF_WINDOW: int = 16  # 2k = 32
    ASW_SIGMA_W: float = 2.0  # 8-bit intensity units
    ASW_INTENSITY_SCALE: float = 255.0
    ASW_MODE: str = "separable"
    ASW_ROW_BLOCK: int = 16  # rows per banded product, fixed so results do not depend on threads
    ASW_TILE: int = 64

    # Cost volume readout
    SOFTMAX_TEMPERATURE: float = 1.0
    DISPARITY_MIN: int = 0
    DISPARITY_MAX: int = 144  # covers the 0.5 m wall (d = 100.8 px)

    # Invalidation
    LR_THETA: float = 1.0
    LR_SAMPLING: str = "bilinear"
    MIN_TEXTURE: float = 0.0  # opt-in floor on the local std, 0 disables it

    # Gradient refinement
    REFINE_STEPS: int = 100
    REFINE_LEARNING_RATE: float = 0.05  # px per step once gradients are RMS-normalized
    REFINE_RMS_DECAY: float = 0.9
    REFINE_MAX_STEP: float = 0.1
    REFINE_PATIENCE: int = 20
    REFINE_SCHEDULE_START: int = 64
    REFINE_SCHEDULE_STEP: int = 200
    HUBER_DELTA: float = 0.5

    # Renderer
    RENDER_SEED: int = 7
    NOISE_SIGMA1: float = 0.05
    NOISE_SIGMA2: float = 0.002
    PATTERN_OVERSAMPLING: int = 4

    # Evaluation
    RANSAC_ITERATIONS: int = 200
    RANSAC_INLIER_TOL: float = 0.01  # meters
    RANSAC_SEED: int = 0
    ERROR_CURVE_THRESHOLDS: tuple = (1.0, 2.0, 3.0, 4.0, 5.0)
    INTENSITY_BINS: int = 10
    MIN_PLANE_PIXELS: int = 100

    # Performance budget checked by the bench command
    BENCH_WIDTH: int = 320
    BENCH_HEIGHT: int = 240
    BENCH_DISPARITIES: int = 64
    BENCH_BUDGET_SECONDS: float = 2.0


# Global settings instance
settings = Settings()

# Evaluation battery used by standard_scenes() and the CLI builtins
STANDARD_SCENE_INFO = {
    "focal_px": 560.0,
    "baseline_m": 0.09,  # 9 cm desk-scale active stereo module
    "width": 320,
    "height": 240,
    "wall_distances_m": [0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5],
    "slant_deg": 50.0,  # rotation about the vertical axis
    "slant_distance_m": 2.0,  # depth on the optical axis
    "box": {
        "wall_m": 2.0,
        "center_m": [0.0, 0.0, 1.2],
        "extents_m": [0.3, 0.3, 0.2],
    },
    "textureless": {"wall_m": 2.0},  # flat ambient, projector off
    "background_m": 20.0,  # closes every scene
}
