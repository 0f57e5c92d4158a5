use std::net::SocketAddr;

use cocobot::diffusion::{ScheduleConfig, ScheduleKind};
use cocobot::energymodel::{ConceptAssignment, InterventionSpec};
use cocobot::sampler::{parse_spec, run_sampler, SamplerConfig};
use cocobot::synthworld::{World, WorldConfig};
use cocobot::trainer::{train, Checkpoint, ModelConfig, TrainConfig};
use cocobot_service::api::*;
use cocobot_service::{serve, AppState, CHECKPOINT_HASH_HEADER, ELAPSED_HEADER};
use serde_json::{json, Value};
use tokio::net::TcpListener;
use tokio::sync::oneshot;

fn small_model() -> ModelConfig {
    ModelConfig { hidden: 16, ..ModelConfig::default() }
}

fn schedule() -> ScheduleConfig {
    ScheduleConfig { kind: ScheduleKind::Cosine, timesteps: 10 }
}

fn trained() -> Checkpoint {
    let world = World::new(WorldConfig::default()).unwrap();
    let cfg = TrainConfig { steps: 60, batch_size: 16, eval_every: 1000, eval_size: 16, ..TrainConfig::default() };
    train(&cfg, &small_model(), &world, &schedule().build().unwrap()).unwrap()
}

fn untrained() -> Checkpoint {
    let world = World::new(WorldConfig::default()).unwrap();
    let cfg = TrainConfig { steps: 0, eval_size: 16, ..TrainConfig::default() };
    train(&cfg, &small_model(), &world, &schedule().build().unwrap()).unwrap()
}

struct Server {
    base: String,
    client: reqwest::Client,
    stop: Option<oneshot::Sender<()>>,
    task: tokio::task::JoinHandle<std::io::Result<()>>,
}

impl Server {
    async fn start(ck: Checkpoint) -> Self {
        let state = AppState::new(ck, SamplerConfig::default()).unwrap();
        let listener = TcpListener::bind(SocketAddr::from(([127, 0, 0, 1], 0))).await.unwrap();
        let base = format!("http://{}", listener.local_addr().unwrap());
        let (tx, rx) = oneshot::channel();
        let task = tokio::spawn(serve(listener, state, async {
            rx.await.ok();
        }));
        Self { base, client: reqwest::Client::new(), stop: Some(tx), task }
    }

    async fn get(&self, path: &str) -> reqwest::Response {
        self.client.get(format!("{}{path}", self.base)).send().await.unwrap()
    }

    async fn post(&self, path: &str, body: &Value) -> reqwest::Response {
        self.client.post(format!("{}{path}", self.base)).json(body).send().await.unwrap()
    }

    async fn stop(mut self) {
        self.stop.take().unwrap().send(()).unwrap();
        self.task.await.unwrap().unwrap();
    }
}

#[tokio::test]
async fn health_and_headers() {
    let ck = untrained();
    let hash = ck.hash().unwrap();
    let s = Server::start(ck).await;
    let r = s.get("/health").await;
    assert_eq!(r.status(), 200);
    assert_eq!(r.headers()[CHECKPOINT_HASH_HEADER], hash.as_str());
    assert!(r.headers()[ELAPSED_HEADER].to_str().unwrap().parse::<f64>().unwrap() >= 0.0);
    let missing = s.get("/nope").await;
    assert_eq!(missing.status(), 404);
    assert_eq!(missing.headers()[CHECKPOINT_HASH_HEADER], hash.as_str());
    s.stop().await;
}

#[tokio::test]
async fn info_flags_untrained_checkpoints() {
    let s = Server::start(untrained()).await;
    let info: InfoResponse = s.get("/info").await.json().await.unwrap();
    assert!(info.untrained);
    assert_eq!((info.latent_dim, info.timesteps, info.concepts), (8, 10, 4));
    s.stop().await;

    let ck = trained();
    let hash = ck.hash().unwrap();
    let s = Server::start(ck).await;
    let info: InfoResponse = s.get("/info").await.json().await.unwrap();
    assert!(!info.untrained);
    assert_eq!(info.step, 60);
    assert_eq!(info.checkpoint_hash, hash);
    s.stop().await;
}

#[tokio::test]
async fn concepts_are_listed_with_default_weights_and_stable_etag() {
    let s = Server::start(untrained()).await;
    let a = s.get("/concepts").await;
    assert_eq!(a.status(), 200);
    let etag = a.headers()["etag"].clone();
    let body: ConceptsResponse = a.json().await.unwrap();
    assert_eq!(body.concepts.len(), 4);
    assert!(body.concepts.iter().all(|c| c.cardinality == 2));
    assert_eq!(body.concepts[0].name, "Smile");
    assert_eq!(body.default_weights.positive, 1.0);
    assert_eq!(body.default_weights.negative, -0.001);
    let b = s.get("/concepts").await;
    assert_eq!(b.headers()["etag"], etag);
    let cached = s.client.get(format!("{}/concepts", s.base)).header("if-none-match", etag).send().await.unwrap();
    assert_eq!(cached.status(), 304);
    s.stop().await;
}

fn smile_request(seed: u64) -> Value {
    json!({
        "interventions": [
            {"concept": "Smile", "state": "active"},
            {"concept": "Male", "state": "negated"}
        ],
        "seed": seed,
        "return_trajectory": true
    })
}

#[tokio::test]
async fn sample_is_deterministic_and_matches_the_library() {
    let ck = trained();
    let spec = parse_spec("+Smile,-Male", ck.network.concepts()).unwrap();
    let direct = run_sampler(&ck.network, &spec, &SamplerConfig { seed: 7, ..SamplerConfig::default() }).unwrap();
    let s = Server::start(ck).await;
    let a = s.post("/sample", &smile_request(7)).await;
    assert_eq!(a.status(), 200);
    let a = a.text().await.unwrap();
    let b = s.post("/sample", &smile_request(7)).await.text().await.unwrap();
    assert_eq!(a, b);
    let r: SampleResponse = serde_json::from_str(&a).unwrap();
    assert_eq!(r.spec, "+Smile,-Male");
    assert_eq!(r.final_latent, direct.final_latent());
    assert_eq!(r.initial_latent, direct.initial_latent());
    assert_eq!(r.energy, direct.final_record().energy);
    assert_eq!(r.updates, 20);
    let traj = r.trajectory.unwrap();
    assert_eq!(traj.len(), 21);
    assert_eq!(traj.first().unwrap().latent, r.initial_latent);
    assert_eq!(traj.last().unwrap().latent, r.final_latent);
    for sc in &r.scores {
        assert!((sc.probabilities.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }
    assert!(r.concept_energies[0].is_some() && r.concept_energies[2].is_none());
    let other: SampleResponse = s.post("/sample", &smile_request(8)).await.json().await.unwrap();
    assert_ne!(other.final_latent, r.final_latent);
    s.stop().await;
}

#[tokio::test]
async fn concurrent_requests_commute() {
    let s = Server::start(trained()).await;
    let seeds: Vec<u64> = (0..6).collect();
    let serial: Vec<String> = {
        let mut out = Vec::new();
        for &seed in &seeds {
            out.push(s.post("/sample", &smile_request(seed)).await.text().await.unwrap());
        }
        out
    };
    let futs = seeds.iter().rev().map(|&seed| {
        let (client, url, body) = (s.client.clone(), format!("{}/sample", s.base), smile_request(seed));
        tokio::spawn(async move { client.post(url).json(&body).send().await.unwrap().text().await.unwrap() })
    });
    let mut parallel = Vec::new();
    for f in futs {
        parallel.push(f.await.unwrap());
    }
    parallel.reverse();
    assert_eq!(serial, parallel);
    s.stop().await;
}

#[tokio::test]
async fn sample_errors_map_to_status_codes() {
    let s = Server::start(untrained()).await;
    let unknown = s.post("/sample", &json!({"interventions": [{"concept": "Nope", "state": "active"}]})).await;
    assert_eq!(unknown.status(), 400);
    let body: ErrorBody = unknown.json().await.unwrap();
    assert_eq!(body.valid_concepts.unwrap(), ["Smile", "Male", "MouthOpen", "Makeup"]);

    let empty = s.post("/sample", &json!({"interventions": []})).await;
    assert_eq!(empty.status(), 422);
    let neutral = s.post("/sample", &json!({"interventions": [{"concept": "Smile", "state": "neutral"}]})).await;
    assert_eq!(neutral.status(), 422);

    let bad_value = s.post("/sample", &json!({"interventions": [{"concept": "Smile", "state": "active", "value": 2}]})).await;
    assert_eq!(bad_value.status(), 400);
    let dup = s
        .post("/sample", &json!({"interventions": [{"concept": "Smile", "state": "active"}, {"concept": "Smile", "state": "negated"}]}))
        .await;
    assert_eq!(dup.status(), 400);
    let bad_eta = s.post("/sample", &json!({"interventions": [{"concept": "Smile", "state": "active"}], "sampler": {"eta": -1.0}})).await;
    assert_eq!(bad_eta.status(), 400);
    let malformed = s.client.post(format!("{}/sample", s.base)).body("{not json").send().await.unwrap();
    assert_eq!(malformed.status(), 400);
    s.stop().await;
}

#[tokio::test]
async fn non_finite_energies_return_500_with_diagnostic() {
    let mut ck = trained();
    let i = ck.network.params().index_of("head.0.weight").unwrap();
    ck.network.params_mut().data_mut(i).iter_mut().for_each(|w| *w = 1e308);
    let s = Server::start(ck).await;
    let r = s.post("/sample", &json!({"interventions": [{"concept": "Smile", "state": "active"}]})).await;
    assert_eq!(r.status(), 500);
    let body: ErrorBody = r.json().await.unwrap();
    let id = body.diagnostic_id.unwrap();
    let again: ErrorBody = s.post("/sample", &json!({"interventions": [{"concept": "Smile", "state": "active"}]})).await.json().await.unwrap();
    assert_ne!(again.diagnostic_id.unwrap(), id);
    s.stop().await;
}

#[tokio::test]
async fn untrained_energy_grid_is_constant() {
    let s = Server::start(untrained()).await;
    let r: EnergyGridResponse = s.post("/energy_grid", &json!({"t": 5, "resolution": 7})).await.json().await.unwrap();
    assert_eq!(r.energies.len(), 7);
    let e0 = r.energies[0][0];
    assert!(r.energies.iter().flatten().all(|&e| e == e0));
    assert!((e0 - 4.0 * std::f64::consts::LN_2).abs() < 1e-12);
    s.stop().await;
}

#[tokio::test]
async fn energy_grid_matches_pointwise_energies() {
    let ck = trained();
    let net = ck.network.clone();
    let s = Server::start(ck).await;
    let origin = vec![0.1, -0.2, 0.3, 0.0, 0.5, -0.4, 0.2, 0.1];
    let u = vec![1.0, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0, -0.5];
    let w = vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0];
    let body = json!({
        "t": 3,
        "resolution": 9,
        "plane": {"origin": origin, "u": u, "w": w, "lo": -2.0, "hi": 1.0},
        "interventions": [{"concept": "Smile", "state": "active"}, {"concept": "Makeup", "state": "negated"}]
    });
    let r: EnergyGridResponse = s.post("/energy_grid", &body).await.json().await.unwrap();
    let spec = parse_spec("+Smile,-Makeup", net.concepts()).unwrap();
    assert_eq!(r.axis.len(), 9);
    assert_eq!((r.axis[0], r.axis[8]), (-2.0, 1.0));
    for (i, row) in r.energies.iter().enumerate() {
        for (j, &e) in row.iter().enumerate() {
            let v: Vec<f64> = (0..8).map(|x| origin[x] + r.axis[j] * u[x] + r.axis[i] * w[x]).collect();
            let direct = net.intervention_energy(&v, 3, &spec).unwrap();
            assert!((e - direct).abs() <= 1e-12, "({i},{j}): {e} vs {direct}");
        }
    }

    let single: EnergyGridResponse = s.post("/energy_grid", &json!({"t": 1, "resolution": 1})).await.json().await.unwrap();
    assert_eq!(single.energies.len(), 1);
    assert_eq!(single.energies[0].len(), 1);
    let all = InterventionSpec::all_active(&ConceptAssignment::new(vec![1; 4]));
    assert!((single.energies[0][0] - net.intervention_energy(&[0.0; 8], 1, &all).unwrap()).abs() <= 1e-12);
    s.stop().await;
}

#[tokio::test]
async fn energy_grid_rejects_bad_requests() {
    let s = Server::start(untrained()).await;
    for body in [
        json!({"t": 1, "resolution": 257}),
        json!({"t": 1, "resolution": 0}),
        json!({"t": 11, "resolution": 4}),
        json!({"t": 1, "resolution": 4, "plane": {"u": [1.0, 0.0]}}),
        json!({"t": 1, "resolution": 4, "plane": {"lo": 2.0, "hi": 1.0}}),
        json!({"t": 1, "resolution": 4, "interventions": [{"concept": "Nope", "state": "active"}]}),
    ] {
        assert_eq!(s.post("/energy_grid", &body).await.status(), 400, "{body}");
    }
    let max = s.post("/energy_grid", &json!({"t": 1, "resolution": 256})).await;
    assert_eq!(max.status(), 200);
    s.stop().await;
}

#[tokio::test]
async fn trajectories_are_truncated_to_512_records() {
    let s = Server::start(untrained()).await;
    let body = json!({
        "interventions": [{"concept": "Smile", "state": "active"}],
        "sampler": {"steps_per_t": 60},
        "return_trajectory": true
    });
    let r: SampleResponse = s.post("/sample", &body).await.json().await.unwrap();
    assert_eq!(r.trajectory_length, Some(601));
    let t = r.trajectory.unwrap();
    assert_eq!(t.len(), 512);
    assert_eq!(t.first().unwrap().latent, r.initial_latent);
    assert_eq!(t.last().unwrap().latent, r.final_latent);
    s.stop().await;
}
