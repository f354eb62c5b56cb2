#![allow(dead_code)]

use std::path::{Path, PathBuf};

use expert_chain::corpus::{write_task_dataset, Instance, Split, TaskDataset};
use expert_chain::reconstruct::IndicatorConfig;
use expert_chain::scenario::{BackendConfig, ProfileTemplate, ScenarioConfig, TaskEntry};

const WORDS: [&str; 12] = [
    "alpha", "bravo", "delta", "echo", "kilo", "lima", "mike", "oscar", "papa", "romeo", "tango", "zulu",
];

/// Reference answer for instance `i` of task `t`: 3 to 11 tokens.
pub fn response_for(t: usize, i: usize) -> String {
    let len = 3 + (i * 7 + t * 5) % 9;
    (0..len)
        .map(|k| WORDS[(t * 3 + i + k * 5) % WORDS.len()])
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn task_id(t: usize) -> String {
    format!("task{t}")
}

fn dataset(t: usize, split: Split, n: usize) -> TaskDataset {
    let (tag, offset) = match split {
        Split::Train => ("train", 0),
        Split::Eval => ("eval", 1000),
    };
    let instances = (0..n)
        .map(|i| Instance::new(format!("{} {tag} question {i}", task_id(t)), response_for(t, i + offset)))
        .collect();
    TaskDataset::new(task_id(t), split, instances)
}

/// Writes `n_tasks` train/eval files under `dir`.
pub fn write_tasks(dir: &Path, n_tasks: usize, train_n: usize, eval_n: usize) -> Vec<TaskEntry> {
    (0..n_tasks)
        .map(|t| {
            let train = dir.join(format!("{}.train.jsonl", task_id(t)));
            let eval = dir.join(format!("{}.eval.jsonl", task_id(t)));
            write_task_dataset(&dataset(t, Split::Train, train_n), &train).unwrap();
            write_task_dataset(&dataset(t, Split::Eval, eval_n), &eval).unwrap();
            TaskEntry {
                id: task_id(t),
                train,
                eval,
                quality: None,
            }
        })
        .collect()
}

pub fn write_ood(dir: &Path, n: usize) -> PathBuf {
    let path = dir.join("ood.jsonl");
    let instances = (0..n).map(|i| Instance::query_only(format!("unrelated request {i}"))).collect();
    write_task_dataset(&TaskDataset::new("ood", Split::Eval, instances), &path).unwrap();
    path
}

pub fn synthetic_config(dir: &Path, tasks: Vec<TaskEntry>, tau: f64, seed: u64, template: ProfileTemplate) -> ScenarioConfig {
    ScenarioConfig {
        name: "fixture".into(),
        tau,
        seed,
        output_dir: dir.join("out"),
        concurrency: 8,
        max_tokens: 512,
        indicators: IndicatorConfig::non_semantic(),
        tasks,
        ood: None,
        backend: BackendConfig::Synthetic {
            template,
            base_quality: 0.0,
        },
    }
}
