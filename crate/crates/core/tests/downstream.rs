use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use eegfm_core::eeg_data::{preprocess, synth_generate, EegRecording, PreprocessConfig, SynthSpec};
use eegfm_core::finetune::metrics::evaluate;
use eegfm_core::finetune::probe::{argmax, features_of, sample_labels};
use eegfm_core::finetune::subset::keep_channels;
use eegfm_core::finetune::two_step::{is_backbone_param, Phase};
use eegfm_core::finetune::{
    channel_subset_eval, evaluate_samples, linear_probe, probe_encoder, two_step_finetune, FinetunePlan, Pooling, ProbeConfig,
};
use eegfm_core::model::{init_pretrain, ModelConfig, ParamSet, INIT_STD};
use eegfm_core::optim::OptimConfig;
use eegfm_core::patching::PatchConfig;
use eegfm_core::pretrain::{pretrain, PretrainConfig, Sample};

fn recordings(spec: &SynthSpec) -> Vec<EegRecording> {
    preprocess(synth_generate(spec).unwrap(), &PreprocessConfig::default())
        .unwrap()
        .kept
}

fn samples(recs: &[EegRecording]) -> Vec<Sample> {
    recs.iter()
        .map(|r| Sample::from_recording(r, &PatchConfig::default()).unwrap())
        .collect()
}

fn pretrained(train: &[Sample], steps: usize) -> ParamSet<f32> {
    let pcfg = PretrainConfig {
        batch_size: 16,
        max_steps: Some(steps),
        ..PretrainConfig::default()
    };
    pretrain(train, &ModelConfig::tiny(), &pcfg, &OptimConfig::default(), 21, |_| Ok(()))
        .unwrap()
        .params
}

#[test]
fn shuffled_labels_probe_at_chance() {
    let cfg = ModelConfig::tiny();
    let params = init_pretrain::<f32>(&cfg, INIT_STD, 3).unwrap();
    let train = samples(&recordings(&SynthSpec::default()));
    let test = samples(&recordings(&SynthSpec {
        seed: 1,
        ..SynthSpec::default()
    }));
    let xtr = features_of(&train, &params, &cfg, Pooling::Mean).unwrap();
    let xte = features_of(&test, &params, &cfg, Pooling::Mean).unwrap();
    let ytr = sample_labels(&train).unwrap();
    let yte = sample_labels(&test).unwrap();
    let pcfg = ProbeConfig {
        epochs: 100,
        ..ProbeConfig::default()
    };
    let mut scores = Vec::new();
    for seed in 0..20 {
        let mut shuffled = ytr.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let (clf, _) = linear_probe(&xtr, &shuffled, &pcfg).unwrap();
        let preds: Vec<usize> = clf.predict_proba(&xte).unwrap().iter().map(|p| argmax(p)).collect();
        scores.push(evaluate(&yte, &preds, None, 2).unwrap().balanced_accuracy.unwrap());
    }
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    assert!((mean - 0.5).abs() <= 0.05, "mean balanced accuracy {mean} over {scores:?}");
}

#[test]
fn freeze_for_the_whole_run_keeps_the_backbone() {
    let cfg = ModelConfig::tiny();
    let train = samples(&recordings(&SynthSpec {
        recordings_per_class: 6,
        ..SynthSpec::default()
    }));
    let base = init_pretrain::<f32>(&cfg, INIT_STD, 4).unwrap();
    let plan = FinetunePlan {
        freeze_steps: 4,
        total_steps: 4,
        batch_size: 4,
        warmup_steps: 1,
        eval_every: 2,
        ..FinetunePlan::default()
    };
    let out = two_step_finetune(&base, &cfg, &train, &[], 2, &plan, |_| Ok(())).unwrap();
    assert!(out.logs.iter().all(|l| l.phase == Phase::Frozen));
    assert!(plan.lora.is_none());
    let merged = out.model.merged().unwrap();
    assert_eq!(
        merged.params.checksum_where(is_backbone_param),
        base.checksum_where(is_backbone_param)
    );
}

#[test]
fn backbone_gradient_switches_on_at_the_boundary() {
    let cfg = ModelConfig::tiny();
    let train = samples(&recordings(&SynthSpec {
        recordings_per_class: 6,
        ..SynthSpec::default()
    }));
    let base = init_pretrain::<f32>(&cfg, INIT_STD, 5).unwrap();
    let plan = FinetunePlan {
        freeze_steps: 3,
        total_steps: 6,
        batch_size: 4,
        warmup_steps: 1,
        eval_every: 3,
        ..FinetunePlan::default()
    };
    let mut norms = Vec::new();
    two_step_finetune(&base, &cfg, &train, &[], 2, &plan, |l| {
        norms.push((l.step, l.backbone_grad_norm, l.head_grad_norm));
        Ok(())
    })
    .unwrap();
    let at = |s: usize| norms.iter().find(|n| n.0 == s).unwrap();
    assert_eq!(at(plan.freeze_steps - 1).1, 0.0);
    assert!(at(plan.freeze_steps - 1).2 > 0.0);
    assert!(at(plan.freeze_steps + 1).1 > 0.0);
}

#[test]
fn channel_subsets() {
    let cfg = ModelConfig::tiny();
    let train_recs = recordings(&SynthSpec::default());
    let train = samples(&train_recs);
    let params = pretrained(&train, 150);
    let (model, _) = probe_encoder(&train, &params, &cfg, &ProbeConfig::default()).unwrap();
    let names = train_recs[0].channel_names.clone();
    let patch = PatchConfig::default();

    let full = evaluate_samples(&model, &train).unwrap();
    assert_eq!(channel_subset_eval(&model, &train_recs, &names, &patch).unwrap(), full);

    let one = keep_channels(&train_recs[0], &names[..1]).unwrap();
    let s = Sample::from_recording(&one, &patch).unwrap();
    assert_eq!(s.n_tokens(), s.n_patches);
    channel_subset_eval(&model, &train_recs, &names[..1], &patch).unwrap();

    for seed in 1..=5 {
        let test = recordings(&SynthSpec {
            seed: 100 + seed,
            ..SynthSpec::default()
        });
        let acc = |k: usize| {
            channel_subset_eval(&model, &test, &names[..k], &patch)
                .unwrap()
                .balanced_accuracy
                .unwrap()
        };
        let (a2, a4, a8) = (acc(2), acc(4), acc(8));
        assert!(a2 <= a4 + 0.05 && a4 <= a8 + 0.05, "seed {seed}: {a2} {a4} {a8}");
    }
}
