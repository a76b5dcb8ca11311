import pandas as pd
import pytest
import torch
from pydantic import ValidationError

from heteroseg import training
from heteroseg.errors import CheckpointError, ShapeError, TrainingError
from heteroseg.missingness import DropoutSchedule, ModalityMask, enumerate_subsets
from heteroseg.nets import NetworkKind, build_model, param_count
from heteroseg.training import (
    ExperimentConfig,
    PretrainPlan,
    TrainConfig,
    Variant,
    assemble_and_finetune,
    network_for,
    pretrain_paths,
    train,
    train_dedicated,
    train_variant,
)


@pytest.fixture
def experiment(tiny_network, tiny_train):
    return ExperimentConfig(
        network=tiny_network(),
        train=tiny_train(),
        pretrain=PretrainPlan(path_epochs=1, fusion_epochs=2),
        dropout_schedule=DropoutSchedule(doubling_period=1),
        num_folds=3,
    )


def parameters(model):
    return {name: p.detach().clone() for name, p in model.named_parameters()}


class TestConfig:
    def test_one_dropout_source(self):
        with pytest.raises(ValidationError):
            TrainConfig(dropout_schedule=DropoutSchedule(), constant_dropout_p=0.5)
        assert TrainConfig(constant_dropout_p=0.5).dropout_p(7) == 0.5
        assert TrainConfig().dropout_p(7) == 0.0
        assert TrainConfig(dropout_schedule=DropoutSchedule()).dropout_p(50) == 0.25

    def test_unknown_keys_rejected(self):
        with pytest.raises(ValidationError):
            ExperimentConfig.model_validate({"train": {"epochs": 2, "momentum": 0.9}})

    def test_presets(self):
        reference = ExperimentConfig.reference()
        assert (reference.train.patch_side, reference.train.epochs, reference.network.base_width) == (108, 150, 32)
        toy = ExperimentConfig.toy(seed=2)
        assert (toy.train.patch_side, toy.network.depth, toy.train.seed) == (60, 3, 2)

    def test_variants(self):
        assert Variant.from_arch("sharedrep", pretrain=True) == Variant.SHAREDREP_PRETRAINED
        assert Variant.from_arch("unet", dedicated=True) == Variant.DEDICATED
        assert Variant.MULTIPATH_PRETRAINED.kind == NetworkKind.MULTIPATH_CONCAT
        assert [v.slug for v in Variant][-3:] == ["multipath_pretrained", "sharedrep_pretrained", "dedicated"]
        with pytest.raises(TrainingError):
            Variant.from_arch("dropout", pretrain=True)

    def test_head_factor_rederived(self, tiny_network):
        concat = network_for(NetworkKind.MULTIPATH_CONCAT, tiny_network())
        assert concat.pathway_head_width_factor == 2
        assert network_for(NetworkKind.MULTIPATH_SHAREDREP, concat).pathway_head_width_factor == 4


class TestTrain:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_loss_descends(self, phantoms, tiny_network, tiny_train, seed):
        cfg = tiny_train(epochs=8, batches_per_epoch=4, seed=seed)
        model = build_model(tiny_network(base_width=4), seed=seed)
        history = train(model, phantoms, cfg).loss_history
        assert history[-1].mean_loss < history[0].mean_loss

    def test_zero_learning_rate_changes_nothing(self, phantoms, tiny_network, tiny_train):
        model = build_model(tiny_network(), seed=0)
        before = parameters(model)
        train(model, phantoms, tiny_train(epochs=1, learning_rate=0.0))
        after = parameters(model)
        assert all(torch.equal(before[name], after[name]) for name in before)

    def test_deterministic(self, phantoms, tiny_network, tiny_train):
        runs = [train(build_model(tiny_network(), seed=0), phantoms, tiny_train()) for _ in range(2)]
        assert [r.mean_loss for r in runs[0].loss_history] == [r.mean_loss for r in runs[1].loss_history]
        for (name, a), b in zip(runs[0].model.state_dict().items(), runs[1].model.state_dict().values()):
            assert torch.equal(a, b), name

    def test_outputs(self, tmp_path, phantoms, tiny_network, tiny_train):
        checkpoint = train(build_model(tiny_network(), seed=0), phantoms, tiny_train(), out_dir=tmp_path)
        assert checkpoint.patches_seen == 3 * 2 * 2
        assert checkpoint.path == tmp_path / "final"
        assert (tmp_path / "epoch_002" / "config.json").exists()
        assert not (tmp_path / "epoch_003").exists()
        history = pd.read_csv(tmp_path / "loss_history.csv")
        assert list(history.columns) == ["epoch", "mean_loss", "p"]
        assert history["epoch"].tolist() == [0, 1, 2]
        assert checkpoint.meta.epoch == 3
        assert checkpoint.meta.train_subjects == sorted(v.subject_id for v, _ in phantoms)

    def test_short_batches_break_epoch_accounting(self, monkeypatch, phantoms, tiny_network, tiny_train):
        draw = training.PatchSampler.draw_batch
        monkeypatch.setattr(
            training.PatchSampler, "draw_batch", lambda self, rng, n: tuple(t[:-1] for t in draw(self, rng, n))
        )
        with pytest.raises(TrainingError, match="consumed 2 patches, expected 4"):
            train(build_model(tiny_network(), seed=0), phantoms, tiny_train())

    @pytest.mark.parametrize("variant", list(Variant))
    def test_every_variant_descends(self, phantoms, tiny_network, tiny_train, variant):
        experiment = ExperimentConfig(
            network=tiny_network(base_width=4),
            train=tiny_train(epochs=8, batches_per_epoch=4),
            pretrain=PretrainPlan(path_epochs=2, fusion_epochs=8),
            dropout_schedule=DropoutSchedule(doubling_period=2),
            num_folds=3,
        )
        flair = [ModalityMask(present=(False, False, False, True))]
        for checkpoint in train_variant(variant, phantoms, experiment, subsets=flair):
            history = checkpoint.loss_history
            assert history[-1].mean_loss < history[0].mean_loss, checkpoint.meta.variant

    def test_channel_mismatch(self, phantoms, tiny_network, tiny_train):
        model = build_model(tiny_network(num_modalities=2), seed=0)
        with pytest.raises(ShapeError):
            train(model, phantoms, tiny_train(), input_channels=[0, 1, 2])

    def test_non_finite_loss(self, monkeypatch, phantoms, tiny_network, tiny_train):
        monkeypatch.setattr(training.F, "cross_entropy", lambda logits, target: logits.sum() * float("nan"))
        with pytest.raises(TrainingError, match="epoch 0, batch 0"):
            train(build_model(tiny_network(), seed=0), phantoms, tiny_train())

    @pytest.mark.parametrize("granularity", ["batch", "sample"])
    def test_dropout_curriculum(self, phantoms, experiment, granularity):
        experiment.train = experiment.train.model_copy(update={"mask_granularity": granularity})
        [checkpoint] = train_variant(Variant.DROPOUT, phantoms, experiment)
        assert [r.p for r in checkpoint.loss_history] == [0.125, 0.25, 0.5]
        [plain] = train_variant(Variant.UNET, phantoms, experiment)
        assert all(r.p == 0.0 for r in plain.loss_history)

    @pytest.mark.parametrize("variant", [Variant.MULTIPATH, Variant.SHAREDREP])
    def test_joint_multipath(self, phantoms, experiment, variant):
        [checkpoint] = train_variant(variant, phantoms, experiment)
        assert checkpoint.meta.network.kind == variant.kind
        assert checkpoint.loss_history[-1].p == 0.5


class TestPretraining:
    def test_one_pathway_per_modality(self, phantoms, experiment):
        paths = pretrain_paths(phantoms, experiment.train, experiment.pretrain, NetworkKind.MULTIPATH_CONCAT, experiment.network)
        assert [p.model.num_inputs for p in paths] == [1, 1, 1, 1]
        assert [p.meta.input_channels for p in paths] == [[0], [1], [2], [3]]

    def test_worker_pool_matches_serial(self, phantoms, experiment):
        args = (phantoms, experiment.train, experiment.pretrain, NetworkKind.MULTIPATH_CONCAT, experiment.network)
        serial = pretrain_paths(*args, workers=1)
        pooled = pretrain_paths(*args, workers=2)
        for a, b in zip(serial, pooled):
            assert [r.mean_loss for r in a.loss_history] == [r.mean_loss for r in b.loss_history]

    def test_concat_freeze_integrity(self, phantoms, experiment):
        kind = NetworkKind.MULTIPATH_CONCAT
        paths = pretrain_paths(phantoms, experiment.train, experiment.pretrain, kind, experiment.network)
        checkpoint = assemble_and_finetune(
            paths, phantoms, experiment.pretrain, kind, experiment.network, experiment.train
        )
        model = checkpoint.model
        assert checkpoint.meta.variant == Variant.MULTIPATH_PRETRAINED.value
        assert param_count(model) == param_count(model.head) + param_count(model.classifier)
        assert all(r.p == 0.5 for r in checkpoint.loss_history)
        for path, pretrained in zip(model.pathways, paths):
            for part in ("encoders", "bottom", "decoders", "head"):
                ours = getattr(path, part).state_dict()
                theirs = getattr(pretrained.model, part).state_dict()
                assert all(torch.equal(ours[k], theirs[k]) for k in ours), part

    def test_sharedrep_heads_are_retrained(self, phantoms, experiment):
        kind = NetworkKind.MULTIPATH_SHAREDREP
        paths = pretrain_paths(phantoms, experiment.train, experiment.pretrain, kind, experiment.network)
        checkpoint = assemble_and_finetune(
            paths, phantoms, experiment.pretrain, kind, experiment.network, experiment.train
        )
        assert checkpoint.meta.heads_replaced
        initial = build_model(network_for(kind, experiment.network), seed=experiment.train.seed)
        initial.freeze_pathways(replace_heads=True, seed=experiment.train.seed)
        for path, fresh, pretrained in zip(checkpoint.model.pathways, initial.pathways, paths):
            assert not torch.equal(path.head[1].weight, fresh.head[1].weight)
            assert torch.equal(path.bottom[0][1].weight, pretrained.model.bottom[0][1].weight)

    def test_heads_cannot_change_width_unreplaced(self, phantoms, experiment):
        kind = NetworkKind.MULTIPATH_SHAREDREP
        plan = experiment.pretrain.model_copy(update={"replace_pathway_heads": False})
        paths = pretrain_paths(phantoms, experiment.train, plan, kind, experiment.network)
        with pytest.raises(CheckpointError, match="does not fit"):
            assemble_and_finetune(paths, phantoms, plan, kind, experiment.network, experiment.train)


class TestDedicated:
    def test_input_arity_per_subset(self, phantoms, tiny_network, tiny_train):
        cfg = tiny_train(epochs=1, batches_per_epoch=1)
        checkpoints = [train_dedicated(phantoms, s, cfg, tiny_network()) for s in enumerate_subsets(4)]
        assert [c.model.num_inputs for c in checkpoints] == [4, 3, 3, 3, 3, 2, 2, 2, 2, 2, 2, 1, 1, 1, 1]
        assert checkpoints[-1].meta.input_channels == [0]
        assert checkpoints[0].meta.network == tiny_network()

    def test_through_train_variant(self, tmp_path, phantoms, experiment):
        subsets = [ModalityMask(present=(False, False, True, True)), ModalityMask(present=(False, False, False, True))]
        checkpoints = train_variant(Variant.DEDICATED, phantoms, experiment, out_dir=tmp_path, subsets=subsets)
        assert [c.path for c in checkpoints] == [tmp_path / "T2W+FLAIR" / "final", tmp_path / "FLAIR" / "final"]
        assert checkpoints[0].meta.variant == "Dedicated T2W+FLAIR"
