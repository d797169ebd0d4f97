//! Multi-step success rates under judges that fail on chosen steps.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vimo_core::agent::{Agent, AgentConfig};
use vimo_core::backend::{FnLlm, LlmBackend, LlmRequest};
use vimo_core::dataset;
use vimo_core::eval::trajectory_accuracy;
use vimo_core::prompts::PromptKind;
use vimo_core::render::FontRenderer;
use vimo_core::synthetic::{ScriptedLlm, SyntheticStrPredictor};
use vimo_core::world_model::WorldModel;
use vimo_core::Episode;

fn episodes() -> Vec<Episode> {
    let m = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/dataset/manifest.jsonl");
    dataset::ingest(&m).unwrap().episodes.into_iter().map(|(_, e)| e).collect()
}

fn agent() -> Agent {
    let llm: Arc<dyn LlmBackend> = Arc::new(ScriptedLlm);
    let wm = WorldModel::new(Arc::new(SyntheticStrPredictor), llm.clone(), FontRenderer::bundled().shared());
    Agent::new(wm, llm, AgentConfig::default())
}

fn field<'a>(prompt: &'a str, key: &str) -> &'a str {
    prompt.lines().rev().find_map(|l| l.strip_prefix(key)).unwrap_or("").trim()
}

/// Fails the alignment check of `goal` at 1-based step `faults[goal]`.
fn faulty_judge(faults: BTreeMap<String, usize>) -> impl LlmBackend {
    FnLlm(move |r: &LlmRequest| {
        if r.kind != PromptKind::TrajectoryAlignment {
            return ScriptedLlm.complete(r);
        }
        let goal = field(&r.prompt, "User Intent:");
        let hist = field(&r.prompt, "Action History:");
        let step = if hist == "None" { 1 } else { hist.split(';').count() + 1 };
        Ok(if faults.get(goal) == Some(&step) {
            "{Reason: different intent, Status: failure}".to_string()
        } else {
            "{Reason: same intent, Status: success}".to_string()
        })
    })
}

#[test]
fn hand_placed_faults() {
    let eps = episodes();
    let faults = BTreeMap::from([
        ("check the inbox".to_string(), 2),
        ("open a new tab".to_string(), 3),
        ("search for invoices".to_string(), 1),
    ]);
    let r = trajectory_accuracy(&eps, 3, &agent(), &faulty_judge(faults)).unwrap();
    // two episodes have only two instructed steps and one has two actions in all
    assert_eq!(r.skipped, ["g2", "c2", "s1"]);
    assert_eq!(r.episodes.len(), 5);
    assert_eq!(r.rates, [80.0, 60.0, 40.0]);
    let g3 = r.episodes.iter().find(|e| e.episode_id == "g3").unwrap();
    assert_eq!(g3.verdicts.len(), 1, "stops at the first failure");
}

#[test]
fn random_faults_never_raise_longer_horizons() {
    let eps = episodes();
    let goals: Vec<String> = eps.iter().map(|e| e.goal.clone()).collect();
    let agent = agent();
    for seed in 0..8 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let faults: BTreeMap<String, usize> = goals
            .iter()
            .filter_map(|g| {
                let step = rng.gen_range(1..=3);
                rng.gen_bool(0.6).then(|| (g.clone(), step))
            })
            .collect();
        for max_l in 1..=3 {
            let r = trajectory_accuracy(&eps, max_l, &agent, &faulty_judge(faults.clone())).unwrap();
            assert_eq!(r.rates.len(), max_l);
            for w in r.rates.windows(2) {
                assert!(w[1] <= w[0], "seed {seed}: {:?}", r.rates);
            }
        }
    }
}
