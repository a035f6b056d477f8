//! Writes a synthetic four-trial dataset with covariates age, time since
//! injury, sex and severity to standard output. The treatment effect is -4
//! for every unit.
//!
//! cargo run -p tate-cli --example synthetic_data -- [seed] > data.csv

use tate_cli::csv_io::{write_csv, Table};
use tate_core::rng::{SeedTree, Stream};
use tate_core::{validate_dataset, Arm, Observation};

const EFFECT: f64 = -4.0;

/// `(age mean, severe share, size)` of the target sample and each trial.
const POPULATIONS: [(f64, f64, usize); 5] =
    [(45.0, 0.35, 600), (38.0, 0.5, 180), (42.0, 0.3, 260), (50.0, 0.4, 320), (35.0, 0.25, 220)];

fn covariates(rng: &mut Stream, age_mean: f64, severe: f64) -> Vec<f64> {
    let age = rng.normal(age_mean, 12.0).clamp(18.0, 85.0).round();
    let tsi = (6.0 + 30.0 * rng.uniform().powi(2)).round();
    let sex = f64::from(u8::from(rng.bernoulli(0.6)));
    let sev = f64::from(u8::from(rng.bernoulli(severe)));
    vec![age, tsi, sex, sev]
}

fn main() {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2024);
    let tree = SeedTree::new(seed);
    let mut raw = Vec::new();
    for (s, &(age_mean, severe, size)) in POPULATIONS.iter().enumerate() {
        let mut rng = tree.derive("study", s as u64);
        let shift = rng.normal(0.0, 2.0);
        for _ in 0..size {
            let x = covariates(&mut rng, age_mean, severe);
            if s == 0 {
                raw.push(Observation::target(x));
                continue;
            }
            let arm = Arm::from_indicator(rng.bernoulli(0.5));
            let a = if arm.is_treat() { 1.0 } else { 0.0 };
            let age = x[0] - 40.0;
            let y = 60.0 + shift - 0.15 * age - 0.004 * age * age - 0.1 * x[1] + 2.0 * x[2] - 6.0 * x[3]
                + EFFECT * a
                + rng.normal(0.0, 8.0);
            raw.push(Observation::trial(s, arm, (y * 100.0).round() / 100.0, x));
        }
    }
    let dataset = validate_dataset(raw, POPULATIONS.len() - 1).expect("valid synthetic data");
    let covariates = ["age", "tsi", "sex", "severe"].map(String::from).to_vec();
    write_csv(std::io::stdout().lock(), &Table { dataset, covariates }).expect("write csv");
}
