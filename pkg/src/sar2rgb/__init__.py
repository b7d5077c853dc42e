"""SAR-to-optical tile translation toolkit.

Pipeline: ingest rasters into the portable tile format, screen optical
tiles for nodata and cloud, curate paired datasets, train SPADE or
pix2pixHD translators, run inference, evaluate MAE/PSNR, ensemble model
outputs and package submissions. Everything is seeded and deterministic.
"""

from .rastercore import (
    BandRole,
    Sensor,
    Tile,
    TileFormatError,
    TileMeta,
    export_png,
    ingest_external,
    read_tile,
    write_tile,
)
from .cloudscreen import (
    CloudMask,
    HeuristicParams,
    ScreenReport,
    decode_qa60,
    heuristic_cloud_mask,
    mask_ratio,
    nodata_ratio,
    screen_tile,
)
from .curation import (
    FILTER_PRESETS,
    FilterSpec,
    MatchKey,
    PairPolicy,
    PairRecord,
    TileRecord,
    filter_dataset,
    model_to_rgb,
    normalize_s1,
    normalize_s2_reflectance,
    pair_manifests,
    rgb_to_model,
    split_holdout,
)
from .sargen import (
    DiscriminatorConfig,
    GanKind,
    GanRole,
    GeneratorConfig,
    LossConfig,
    Variant,
    build_discriminator,
    build_generator,
    discriminate,
    gan_loss,
    generate,
    l1_loss,
    spade_normalize,
    total_generator_loss,
)
from .trainer import (
    Checkpoint,
    LossTrace,
    NonFiniteLossError,
    OptimConfig,
    TrainConfig,
    infer,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .evalkit import (
    EnsembleMode,
    EnsembleSpec,
    MetricsReport,
    ensemble,
    evaluate,
    mae,
    package_submission,
    psnr,
)
from .fixtures import synth_fixture

__version__ = "0.1.0"
