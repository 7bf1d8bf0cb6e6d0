import dataclasses

import pytest

from hotlesion import taxonomy as tx
from hotlesion.synthgen import CategoryParams, GenSpec, generate_dataset, mini_genspec

MICRO_MODEL_KW = dict(
    image_size=32, feature_dim=16, encoder_layers=1, decoder_layers=1,
    attention_heads=2, ffn_dim=32, level_sizes=(2, 4, 12),
)


def train_checkpoint(dataset, out_dir, variant="hierarchical_mpl", modality="clinical",
                     strategy="MX5", epochs=4, seed=5, calibrate=True, **model_kw):
    """Train + optionally calibrate one micro checkpoint; returns the ckpt dir."""
    from hotlesion.calibration import calibrate_checkpoint
    from hotlesion.model import ModelConfig
    from hotlesion.training import TrainConfig, train

    kw = dict(MICRO_MODEL_KW)
    kw.update(model_kw)
    model_cfg = ModelConfig(variant=variant, modality=modality, **kw)
    train_cfg = TrainConfig(batch_size=32, initial_lr=3e-4, epochs=epochs,
                            strategy=strategy, seed=seed)
    train(
        dataset["records"], dataset["taxonomy"], dataset["partition"],
        model_cfg, train_cfg, dataset["root"], out_dir=out_dir,
    )
    if calibrate:
        calibrate_checkpoint(out_dir, dataset["records"], dataset["root"])
    return out_dir


def micro_genspec(seed: int = 3) -> GenSpec:
    """Scaled-down spec for fast unit tests: same structure as the shipped
    mini spec, ~400 lesions at 32 px."""
    spec = mini_genspec(seed=seed)
    scaled = {}
    for idx, count in spec.per_category_counts.items():
        subset = count / max(spec.per_category_counts.values())
        if count >= 1000:
            scaled[idx] = 60
        elif count >= 100:
            scaled[idx] = 24
        elif count >= 35:
            scaled[idx] = 12
        else:
            scaled[idx] = 8
    return dataclasses.replace(
        spec,
        per_category_counts=scaled,
        image_size=32,
        patients=120,
        seed=seed,
        id_cutoff=10,
        id_percentile=0.25,
        subset_thresholds=(40, 20, 10),
        unknown_per_kind=4,
    )


@pytest.fixture(scope="session")
def micro_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("micro_data")
    spec = micro_genspec()
    manifest, records = generate_dataset(spec, out)
    taxonomy = tx.load_taxonomy_file(out / "taxonomy.tsv")
    taxonomy, partition = tx.build_partition(
        taxonomy, spec.id_cutoff, spec.id_percentile, spec.subset_thresholds
    )
    return {
        "root": out,
        "manifest": manifest,
        "records": tx.read_manifest(manifest, taxonomy),
        "taxonomy": taxonomy,
        "partition": partition,
        "spec": spec,
    }


@pytest.fixture(scope="session")
def micro_bundle(tmp_path_factory, micro_dataset):
    """Bundle dir with calibrated clinical + dermoscopic + multimodal micro models."""
    out = tmp_path_factory.mktemp("micro_bundle")
    train_checkpoint(micro_dataset, out / "clinical", modality="clinical", epochs=6)
    train_checkpoint(micro_dataset, out / "dermoscopic", modality="dermoscopic", epochs=6)
    train_checkpoint(micro_dataset, out / "multimodal", modality="multimodal", epochs=6)
    return out


@pytest.fixture(scope="session")
def mini_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("mini_data")
    spec = mini_genspec(seed=7)
    manifest, records = generate_dataset(spec, out)
    taxonomy = tx.load_taxonomy_file(out / "taxonomy.tsv")
    taxonomy, partition = tx.build_partition(
        taxonomy, spec.id_cutoff, spec.id_percentile, spec.subset_thresholds
    )
    return {
        "root": out,
        "manifest": manifest,
        "records": tx.read_manifest(manifest, taxonomy),
        "taxonomy": taxonomy,
        "partition": partition,
        "spec": spec,
    }
