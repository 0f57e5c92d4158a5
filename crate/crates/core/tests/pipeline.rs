use cocobot::diffusion::{ScheduleConfig, ScheduleKind};
use cocobot::energymodel::{EnergyNetwork, InterventionSpec};
use cocobot::evalsuite::{run_eval, EvalConfig, EvalReport};
use cocobot::sampler::{parse_spec, run_sampler, SamplerConfig};
use cocobot::synthworld::{World, WorldConfig};
use cocobot::trainer::{score_matching_loss, train, Checkpoint, ModelConfig, TrainConfig};

/// Mean score-matching loss over a fixed set of noised prior draws.
fn fixed_score_loss(net: &EnergyNetwork, world: &World) -> f64 {
    let schedule = ScheduleConfig { kind: ScheduleKind::Cosine, timesteps: 20 }.build().unwrap();
    let mut total = 0.0;
    for i in 0..200u64 {
        let v0 = world.sample_prior(i);
        let eps = world.sample_prior(1_000 + i);
        let t = 1 + (i as usize % 20);
        total += score_matching_loss(net, &schedule, &v0, &world.oracle_label(&v0), t, &eps).unwrap();
    }
    total / 200.0
}

fn short_run() -> (Checkpoint, World) {
    let world = World::new(WorldConfig::with_concepts(8, 2, 0).unwrap()).unwrap();
    let schedule = ScheduleConfig { kind: ScheduleKind::Cosine, timesteps: 20 }.build().unwrap();
    let cfg = TrainConfig { steps: 400, batch_size: 32, eval_every: 100, eval_size: 64, ..TrainConfig::default() };
    let model = ModelConfig { hidden: 32, time_dim: 8, ..ModelConfig::default() };
    (train(&cfg, &model, &world, &schedule).unwrap(), world)
}

#[test]
fn train_sample_evaluate_round_trip() {
    let (ck, world) = short_run();
    assert_eq!(ck.step, 400);
    let untrained = EnergyNetwork::new(world.concepts().clone(), ck.network.arch().clone(), 0).unwrap();
    let (before, after) = (fixed_score_loss(&untrained, &world), fixed_score_loss(&ck.network, &world));
    assert!(after < before, "{before} -> {after}");

    let dir = tempfile::tempdir().unwrap();
    ck.save(dir.path()).unwrap();
    let loaded = Checkpoint::load(dir.path()).unwrap();
    assert_eq!(loaded.hash().unwrap(), ck.hash().unwrap());

    let spec = parse_spec("+Smile", world.concepts()).unwrap();
    let cfg = SamplerConfig { seed: 9, ..SamplerConfig::default() };
    let a = run_sampler(&ck.network, &spec, &cfg).unwrap();
    let b = run_sampler(&loaded.network, &spec, &cfg).unwrap();
    assert_eq!(a.final_latent(), b.final_latent());
    assert_eq!(a.records.len(), 2 * 20 + 1);

    let eval = EvalConfig { n: 60, permutations: 19, ..EvalConfig::default() };
    let specs = [spec, parse_spec("+Smile,-Male", world.concepts()).unwrap()];
    let report = run_eval(&loaded, &world, &specs, &eval).unwrap();
    let back: EvalReport = serde_json::from_str(&report.to_json().unwrap()).unwrap();
    assert_eq!(back, report);
    assert_eq!(report.to_json().unwrap(), run_eval(&ck, &world, &specs, &eval).unwrap().to_json().unwrap());
}

#[test]
fn trained_descent_lowers_the_intervention_energy() {
    let (ck, world) = short_run();
    let spec = InterventionSpec::all_active(&world.oracle_label(&world.sample_prior(1)));
    let cfg = SamplerConfig { seed: 4, ..SamplerConfig::default() };
    let traj = run_sampler(&ck.network, &spec, &cfg).unwrap();
    let mut v = traj.initial_latent().to_vec();
    let e0 = ck.network.intervention_energy(&v, 5, &spec).unwrap();
    for _ in 0..20 {
        v = cocobot::sampler::intervention_step(&ck.network, &v, 5, &spec, 1e-3).unwrap();
    }
    assert!(ck.network.intervention_energy(&v, 5, &spec).unwrap() < e0);
}
