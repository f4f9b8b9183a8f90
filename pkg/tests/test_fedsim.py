import numpy as np
import pytest

import fedpia.fedsim as fedsim
from fedpia.data import Dataset
from fedpia.fedsim import (
    ClientRoundRecord,
    ClientState,
    DataConfig,
    ExperimentConfig,
    LrSchedule,
    ModelConfig,
    RoundMetrics,
    _macro_f1_multi,
    _macro_f1_single,
    benchmark_config,
    build_federation,
    dataset_loss,
    evaluate,
    local_train,
    run_experiment,
    run_round,
    spike_score,
)
from fedpia.model import AdapterLayer, AdapterStack, Backbone, ClassifierHead
from fedpia.numerics import Rng
from fedpia.pia import FusionConfig


def tiny_config(**overrides) -> ExperimentConfig:
    base = dict(
        methods=("fedpia", "fedavg_adapters"),
        clients=3,
        rounds=3,
        local_steps=8,
        batch_size=8,
        base_lr=0.01,
        seeds=(0,),
        model=ModelConfig(width=8, bottleneck=2, depth=1),
        data=DataConfig(n_samples=300, features=6, num_classes=3, concentration=1.0),
    )
    base.update(overrides)
    return ExperimentConfig(**base)


class TestLocalTrain:
    def _client(self, cfg, seed=0, method="fedpia"):
        fed = build_federation(cfg, seed, method)
        return fed, fed.clients[0]

    def test_lr_zero_freezes_params_and_losses(self):
        cfg = tiny_config(base_lr=0.0, batch_size=10_000)  # full-batch steps
        fed, client = self._client(cfg)
        before = client.stack.flatten().copy()
        head_before = client.head.w.copy()
        sched = LrSchedule(base_lr=0.0, total_steps=100, warmup_frac=0.0)
        losses = local_train(client, 5, sched, 1, 0, cfg.batch_size, 0.01)
        assert np.array_equal(client.stack.flatten(), before)
        assert np.array_equal(client.head.w, head_before)
        assert len(set(losses)) == 1

    def test_training_reduces_loss_on_separable_blobs(self):
        cfg = tiny_config(
            data=DataConfig(n_samples=400, features=6, num_classes=2,
                            concentration=10.0, margin=4.0),
            clients=2,
        )
        fed, client = self._client(cfg)
        sched = LrSchedule(base_lr=0.01, total_steps=1000, warmup_frac=0.0)
        start = dataset_loss(client, client.train)
        local_train(client, 50, sched, 1, 10, 16, 0.01)
        assert dataset_loss(client, client.train) < start

    def test_same_seed_identical_loss_traces(self):
        cfg = tiny_config()
        _, c1 = self._client(cfg, seed=4)
        _, c2 = self._client(cfg, seed=4)
        sched = LrSchedule(base_lr=0.01, total_steps=100, warmup_frac=0.1)
        l1 = local_train(c1, 10, sched, 2, 0, 8, 0.01)
        l2 = local_train(c2, 10, sched, 2, 0, 8, 0.01)
        assert l1 == l2


class TestEvaluate:
    def _rigged_client(self, features, labels, num_classes, kind):
        d = features.shape[1]
        backbone = Backbone(
            weights=[np.eye(d)], biases=[np.zeros(d)], input_dim=d, width=d,
            activations=["linear"],
        )
        adapters = AdapterStack(
            [AdapterLayer(np.zeros((d, 1)), np.zeros(1), np.zeros((1, d)), np.zeros(d))]
        )
        head = ClassifierHead(w=10.0 * np.eye(d)[:, :num_classes], b=np.zeros(num_classes))
        ds = Dataset(features, labels, num_classes, kind)
        return ClientState(
            id=0, train=ds, eval=ds, stack=adapters, head=head,
            backbone=backbone, rng=Rng(0),
        )

    def test_perfect_predictor(self):
        feats = np.eye(3)[np.array([0, 1, 2, 1, 0])] * 2.0
        labels = np.array([0, 1, 2, 1, 0])
        client = self._rigged_client(feats, labels, 3, "single")
        acc, f1 = evaluate(client, client.eval)
        assert acc == 1.0 and f1 == 1.0

    def test_constant_predictor_on_balanced_classes(self):
        feats = np.zeros((10, 3))
        labels = np.array([0, 1] * 5)
        client = self._rigged_client(feats, labels, 2, "single")
        acc, _ = evaluate(client, client.eval)
        assert acc == 0.5

    def test_hand_computed_multilabel_macro_f1(self):
        pred = np.array([[1, 0], [1, 1], [0, 0], [1, 0]], dtype=float)
        truth = np.array([[1, 0], [0, 1], [0, 1], [1, 1]], dtype=float)
        # class 0: tp=2 fp=1 fn=0 -> 0.8; class 1: tp=1 fp=0 fn=2 -> 0.5
        assert _macro_f1_multi(pred, truth) == pytest.approx(0.65, abs=1e-12)

    def test_hand_computed_single_label_macro_f1(self):
        pred = np.array([0, 0, 1, 2])
        truth = np.array([0, 1, 1, 1])
        # c0: tp1 fp1 fn0 -> 2/3; c1: tp1 fp0 fn2 -> 0.5; c2: tp0 fp1 fn0 -> 0
        expect = (2 / 3 + 0.5 + 0.0) / 3
        assert _macro_f1_single(pred, truth, 3) == pytest.approx(expect, abs=1e-12)


class TestSpikeScore:
    def _metrics(self, pairs):
        out = []
        for i, (start, end) in enumerate(pairs, start=1):
            rec = ClientRoundRecord(0, start, end, 0.0, 0.0)
            out.append(RoundMetrics(i, [rec], start, end, 0.0, 0.0))
        return out

    def test_flat_trace_scores_zero(self):
        m = self._metrics([(1.0, 0.8), (0.8, 0.6), (0.6, 0.5)])
        assert spike_score(m) == 0.0

    def test_known_jumps(self):
        m = self._metrics([(1.0, 0.5), (0.7, 0.4), (0.8, 0.3)])
        assert spike_score(m) == pytest.approx(0.3, abs=1e-12)

    def test_needs_two_rounds(self):
        with pytest.raises(ValueError):
            spike_score(self._metrics([(1.0, 0.5)]))


class TestRunRound:
    def test_bookkeeping_contract(self):
        cfg = tiny_config(methods=("local_only",))
        fed = build_federation(cfg, 0, "local_only")
        pre_losses = {c.id: dataset_loss(c, c.train) for c in fed.clients}
        metrics = run_round(fed, cfg, "local_only", 1)
        assert metrics.round_index == 1
        assert len(metrics.clients) == cfg.clients
        for rec in metrics.clients:
            assert rec.loss_start == pre_losses[rec.client_id]
            assert np.isfinite(rec.loss_end)
        assert metrics.wall_time >= 0.0

    def test_single_client_fedpia_equals_local_training(self):
        cfg = tiny_config(clients=1, rounds=3)
        m_pia, fed_pia = run_experiment(cfg, "fedpia", 0)
        m_loc, fed_loc = run_experiment(cfg, "local_only", 0)
        assert [m.to_record("x", 0) for m in m_pia] == [
            m.to_record("x", 0) for m in m_loc
        ]
        assert np.array_equal(
            fed_pia.clients[0].stack.flatten(), fed_loc.clients[0].stack.flatten()
        )

    def test_ablation_flags_reduce_to_fedavg_bitwise(self):
        cfg = tiny_config(
            server_pia_on=False,
            client_pia_on=False,
            fusion=FusionConfig(lambda_merge=0.0),
        )
        m_pia, _ = run_experiment(cfg, "fedpia", 0)
        m_avg, _ = run_experiment(cfg, "fedavg_adapters", 0)
        assert [m.to_record("x", 0) for m in m_pia] == [
            m.to_record("x", 0) for m in m_avg
        ]

    def test_privacy_only_adapter_stacks_cross(self, monkeypatch):
        seen = []
        original = fedsim._server_reduce

        def spy(method, uploads, sizes, cfg):
            seen.append((uploads, sizes))
            return original(method, uploads, sizes, cfg)

        monkeypatch.setattr(fedsim, "_server_reduce", spy)
        cfg = tiny_config()
        run_experiment(cfg, "fedpia", 0)
        assert seen
        for uploads, sizes in seen:
            for item in uploads:
                assert isinstance(item, AdapterStack)
            for n in sizes:
                assert isinstance(n, int)

    def test_homogeneous_iid_fedpia_matches_fedavg(self):
        cfg = tiny_config(
            clients=3,
            rounds=1,
            local_steps=3,
            base_lr=1e-6,
            data=DataConfig(n_samples=600, features=6, num_classes=3,
                            concentration=1e6),
            model=ModelConfig(width=8, bottleneck=2, depth=1, shared_adapter_init=True),
        )
        _, fed_pia = run_experiment(cfg, "fedpia", 0)
        _, fed_avg = run_experiment(cfg, "fedavg_adapters", 0)
        diff = np.abs(fed_pia.global_stack.flatten() - fed_avg.global_stack.flatten())
        assert diff.max() < 1e-6

    def test_full_experiment_determinism(self):
        cfg = tiny_config()
        a, _ = run_experiment(cfg, "fedpia", 1)
        b, _ = run_experiment(cfg, "fedpia", 1)
        assert [m.to_record("m", 1) for m in a] == [m.to_record("m", 1) for m in b]

    def test_round_indices_contiguous(self):
        cfg = tiny_config(rounds=4)
        metrics, _ = run_experiment(cfg, "fedavg_adapters", 0)
        assert [m.round_index for m in metrics] == [1, 2, 3, 4]


class TestMethods:
    def test_backbone_immutable_through_experiment(self):
        cfg = tiny_config()
        _, fed = run_experiment(cfg, "fedpia", 0)
        ref = fedsim.init_backbone(
            Rng(0).child("backbone"), cfg.data.features, cfg.model.width, cfg.model.depth
        )
        for w1, w2 in zip(fed.backbone.weights, ref.weights):
            assert np.array_equal(w1, w2)

    def test_classifier_only_never_touches_adapters(self):
        cfg = tiny_config(methods=("classifier_only",))
        fed = build_federation(cfg, 0, "classifier_only")
        before = fed.clients[0].stack.flatten().copy()
        head_before = fed.clients[0].head.w.copy()
        run_round(fed, cfg, "classifier_only", 1)
        assert np.array_equal(fed.clients[0].stack.flatten(), before)
        assert not np.array_equal(fed.clients[0].head.w, head_before)

    def test_full_finetune_trains_private_backbone_copy(self):
        cfg = tiny_config(methods=("full_finetune",))
        fed = build_federation(cfg, 0, "full_finetune")
        shared = fedsim.init_backbone(
            Rng(0).child("backbone"), cfg.data.features, cfg.model.width, cfg.model.depth
        )
        client = fed.clients[0]
        assert np.array_equal(client.backbone.weights[0], shared.weights[0])
        run_round(fed, cfg, "full_finetune", 1)
        assert not np.array_equal(client.backbone.weights[0], shared.weights[0])

    def test_local_only_keeps_global_stack(self):
        cfg = tiny_config(methods=("local_only",))
        fed = build_federation(cfg, 0, "local_only")
        before = fed.global_stack.flatten().copy()
        run_round(fed, cfg, "local_only", 1)
        assert np.array_equal(fed.global_stack.flatten(), before)

    def test_heads_are_client_private_and_sized_by_mask(self):
        cfg = tiny_config(
            clients=3,
            data=DataConfig(
                n_samples=600, features=6, num_classes=6, concentration=0.5,
                class_masks=[[0, 1], [1, 2, 3], [3, 4, 5]],
            ),
        )
        fed = build_federation(cfg, 0, "fedpia")
        assert [c.head.num_classes for c in fed.clients] == [2, 3, 3]

    def test_dataset_fraction_shrinks_train_split(self):
        cfg = tiny_config()
        full = build_federation(cfg, 0, "fedpia")
        frac = build_federation(tiny_config(dataset_fraction=0.5), 0, "fedpia")
        for f, h in zip(full.clients, frac.clients):
            assert len(h.train) == max(1, int(np.ceil(0.5 * len(f.train))))
            assert len(h.eval) == len(f.eval)

    def test_mixed_kind_builds_both_task_types(self):
        cfg = tiny_config(
            clients=4,
            data=DataConfig(
                n_samples=400, features=6, num_classes=4, kind="mixed",
                concentration=1.0, mixed_single_clients=2,
            ),
        )
        fed = build_federation(cfg, 0, "fedpia")
        assert [c.kind for c in fed.clients] == ["single", "single", "multi", "multi"]
        metrics = run_round(fed, cfg, "fedpia", 1)
        assert len(metrics.clients) == 4


class TestBenchmarkConfig:
    def test_pinned_structure(self):
        cfg = benchmark_config()
        assert cfg.clients == 5
        assert cfg.rounds == 30
        assert cfg.data.concentration == 0.5
        masks = cfg.data.class_masks
        assert masks is not None and len({len(m) for m in masks}) > 1
        assert len(cfg.seeds) == 5

    def test_task_heterogeneous_variant(self):
        cfg = benchmark_config(task_heterogeneous=True)
        assert cfg.data.kind == "mixed"
        assert 1 <= cfg.data.mixed_single_clients < cfg.clients
