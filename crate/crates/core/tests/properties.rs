use mrt_core::checkpoint::Checkpoint;
use mrt_core::config::RunConfig;
use mrt_core::data::{make_dataset, make_dataset_with, Split, Task, TemplateId};
use mrt_core::diagnostics::{segment_ablation, SegmentMode, SweepSpec};
use mrt_core::model::{forward_logits, Trainable};
use mrt_core::parallel::Execution;
use mrt_core::train::{batch_gradients, lr_at, train_editors};
use mrt_core::{orthonormalize, EditPlan, EditorSet, Tensor, ToyModel, ToyModelConfig, TrainConfig};
use proptest::prelude::*;

fn micro() -> ToyModelConfig {
    ToyModelConfig {
        d_v: 8,
        d_t: 8,
        vision_layers: 2,
        decoder_layers: 2,
        heads: 2,
        mlp_ratio: 2,
        ..ToyModelConfig::default()
    }
}

fn micro_plan(cfg: &ToyModelConfig) -> EditPlan {
    EditPlan {
        visual_rank: 2,
        multimodal_rank: 2,
        prefix_len: 2,
        suffix_len: 2,
        ..EditPlan::full(cfg)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn orthonormalized_rows_are_orthonormal(rank in 1usize..6, extra in 0usize..6, vals in proptest::collection::vec(-4.0f64..4.0, 121)) {
        let dim = rank + extra;
        let mut data = vals[..rank * dim].to_vec();
        // keep the rows independent
        for r in 0..rank {
            data[r * dim + r] += 10.0;
        }
        let u = orthonormalize(&Tensor::new(vec![rank, dim], data).unwrap()).unwrap();
        let gram = u.matmul(&u.transpose()).unwrap();
        prop_assert!(gram.max_abs_diff(&Tensor::eye(rank)) < 1e-8);
    }

    #[test]
    fn schedule_stays_within_peak(total in 1usize..400, warm in 0.0f64..0.5, lr in 1e-5f64..1.0) {
        let cfg = TrainConfig { learning_rate: lr, warmup_ratio: warm, ..TrainConfig::default() };
        for s in 0..total {
            let v = lr_at(s, total, &cfg);
            prop_assert!(v >= 0.0 && v <= lr * (1.0 + 1e-12));
        }
    }

    #[test]
    fn config_round_trips(vr in 1usize..=32, mr in 1usize..=48, lr in 1e-5f64..1e-1, seed in any::<u64>()) {
        let mut cfg = RunConfig::default();
        cfg.plan.visual_rank = vr;
        cfg.plan.multimodal_rank = mr;
        cfg.train.learning_rate = lr;
        cfg.seed = seed;
        let back = RunConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn datasets_are_pure_functions_of_seed(seed in any::<u64>(), yesno in any::<bool>()) {
        let (task, template) = if yesno { (Task::YesNo, TemplateId::YesNoAlt) } else { (Task::Classify, TemplateId::ClassifyAlt) };
        let a = make_dataset_with(task, template, 1, seed, Split::Test, None).unwrap();
        let b = make_dataset_with(task, template, 1, seed, Split::Test, None).unwrap();
        prop_assert_eq!(a, b);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn checkpoint_round_trip_is_bit_exact(model_seed in any::<u64>(), editor_seed in any::<u64>()) {
        let cfg = micro();
        let model = ToyModel::init(cfg.clone(), model_seed).unwrap();
        let plan = micro_plan(&cfg);
        let editors = plan.init_editors(&cfg, editor_seed).unwrap();
        let ckpt = Checkpoint::new(&model, Some(&plan), &editors);
        let back = Checkpoint::from_bytes(&ckpt.to_bytes().unwrap()).unwrap();
        prop_assert_eq!(&back, &ckpt);
        let s = &make_dataset(Task::YesNo, 1, model_seed, Split::Train).unwrap()[0];
        let a = forward_logits(&model, s, &editors, &plan).unwrap();
        let b = forward_logits(&back.model().unwrap(), s, &back.editors, &plan).unwrap();
        prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn identity_editors_leave_logits_unchanged(model_seed in any::<u64>(), editor_seed in any::<u64>()) {
        let cfg = micro();
        let model = ToyModel::init(cfg.clone(), model_seed).unwrap();
        let plan = micro_plan(&cfg);
        let editors = plan.init_editors(&cfg, editor_seed).unwrap().to_identity().unwrap();
        let s = &make_dataset(Task::Classify, 1, editor_seed, Split::Test).unwrap()[0];
        let edited = forward_logits(&model, s, &editors, &plan).unwrap();
        let plain = forward_logits(&model, s, &EditorSet::new(), &EditPlan::none()).unwrap();
        prop_assert!(edited.max_abs_diff(&plain) < 1e-12);
    }
}

#[test]
fn parallel_and_sequential_gradients_are_identical() {
    let cfg = micro();
    let model = ToyModel::init(cfg.clone(), 3).unwrap();
    let plan = micro_plan(&cfg);
    let editors = plan.init_editors(&cfg, 4).unwrap();
    let data = make_dataset(Task::Classify, 2, 5, Split::Train).unwrap();
    let batch: Vec<_> = data.iter().collect();
    let (lp, gp) = batch_gradients(&model, &editors, &plan, &batch, Trainable::Editors, Execution::Parallel).unwrap();
    let (ls, gs) = batch_gradients(&model, &editors, &plan, &batch, Trainable::Editors, Execution::Sequential).unwrap();
    assert_eq!(lp.to_bits(), ls.to_bits());
    assert_eq!(gp, gs);
}

#[test]
fn training_never_touches_the_base() {
    let cfg = micro();
    let model = ToyModel::init(cfg.clone(), 6).unwrap();
    let before = model.weights.hash();
    let plan = micro_plan(&cfg);
    let data = make_dataset(Task::YesNo, 3, 7, Split::Train).unwrap();
    let tcfg = TrainConfig { batch_size: 8, ..TrainConfig::default() };
    let (editors, metrics) = train_editors(&model, &plan, &data, &tcfg, None).unwrap();
    assert_eq!(model.weights.hash(), before);
    let names = editors.tensor_names();
    assert!(metrics.updated_tensors.iter().all(|n| names.contains(n) && n.starts_with("editor.")));
    assert_eq!(metrics.optimizer_scalars, editors.param_count());
}

#[test]
fn sweep_cells_do_not_depend_on_sweep_contents() {
    let cfg = micro();
    let model = ToyModel::init(cfg.clone(), 8).unwrap();
    let spec = SweepSpec {
        segments: vec![SegmentMode::PrefixOnly, SegmentMode::SuffixOnly],
        seeds: vec![0],
        train_per_class: 1,
        test_per_class: 1,
        base_plan: micro_plan(&cfg),
        train: TrainConfig { epochs: 1, batch_size: 4, ..TrainConfig::default() },
        visual_ranks: vec![2],
        multimodal_ranks: vec![2],
        lengths: vec![2],
        ..SweepSpec::default()
    };
    let both = segment_ablation(&model, &spec).unwrap();
    let alone = segment_ablation(&model, &SweepSpec { segments: vec![SegmentMode::SuffixOnly], ..spec.clone() }).unwrap();
    assert_eq!(both[1], alone[0]);
}
