//! The ablation grid: the toggle combinations of the comparative table
//! (baseline, each lead component alone, then the cumulative chain), run
//! over several seeds with a bounded worker pool.

use std::collections::VecDeque;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, Toggles};
use crate::error::Result;
use crate::trainer::{fit, MetricReport};
use crate::types::Dataset;

/// Named toggle combination.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridRow {
    pub name: String,
    pub toggles: Toggles,
}

/// The comparative-table layout: baseline, the two lead components alone and
/// combined, then each remaining component added on the cumulative chain.
pub fn table_rows() -> Vec<GridRow> {
    let t = |mdsbn, br, mlg, fd, ie, id| Toggles {
        mdsbn,
        br,
        mlg,
        fd,
        ie,
        id,
    };
    vec![
        GridRow { name: "baseline".into(), toggles: Toggles::all_off() },
        GridRow { name: "mdsbn".into(), toggles: t(true, false, false, false, false, false) },
        GridRow { name: "br".into(), toggles: t(false, true, false, false, false, false) },
        GridRow { name: "mdsbn+br".into(), toggles: t(true, true, false, false, false, false) },
        GridRow { name: "mdsbn+br+mlg".into(), toggles: t(true, true, true, false, false, false) },
        GridRow { name: "mdsbn+br+fd".into(), toggles: t(true, true, false, true, false, false) },
        GridRow { name: "mdsbn+br+mlg+fd".into(), toggles: t(true, true, true, true, false, false) },
        GridRow { name: "mdsbn+br+mlg+fd+ie".into(), toggles: t(true, true, true, true, true, false) },
        GridRow { name: "mdsbn+br+mlg+fd+id".into(), toggles: t(true, true, true, true, false, true) },
        GridRow { name: "full".into(), toggles: t(true, true, true, true, true, true) },
    ]
}

/// The cumulative chain (each step adds one component in table order); used
/// for the directional checks.
pub fn cumulative_chain() -> Vec<GridRow> {
    let all = table_rows();
    ["baseline", "mdsbn", "mdsbn+br", "mdsbn+br+mlg", "mdsbn+br+mlg+fd", "mdsbn+br+mlg+fd+ie", "full"]
        .iter()
        .map(|name| all.iter().find(|r| &r.name == name).unwrap().clone())
        .collect()
}

/// One completed (combination, seed) cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationCell {
    pub name: String,
    pub toggles: Toggles,
    pub seed: u64,
    pub report: MetricReport,
}

/// Run `rows` x `seeds` training runs, at most `jobs` in parallel. Each job
/// is internally single-threaded and fully determined by (toggles, seed), so
/// the grid is reproducible regardless of scheduling.
pub fn run_grid(
    base: &RunConfig,
    dataset: &Dataset,
    rows: &[GridRow],
    seeds: &[u64],
    jobs: usize,
) -> Result<Vec<AblationCell>> {
    let mut tasks: VecDeque<(usize, GridRow, u64)> = VecDeque::new();
    let mut idx = 0;
    for row in rows {
        for &seed in seeds {
            tasks.push_back((idx, row.clone(), seed));
            idx += 1;
        }
    }
    let total = tasks.len();
    let queue = Mutex::new(tasks);
    let results: Mutex<Vec<Option<AblationCell>>> = Mutex::new(vec![None; total]);
    let errors: Mutex<Vec<crate::Error>> = Mutex::new(Vec::new());
    let workers = jobs.max(1).min(total.max(1));

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let task = queue.lock().unwrap().pop_front();
                let Some((i, row, seed)) = task else { break };
                let mut cfg = base.clone();
                cfg.train.toggles = row.toggles;
                cfg.train.seed = seed;
                match fit(&cfg, dataset) {
                    Ok(r) => {
                        results.lock().unwrap()[i] = Some(AblationCell {
                            name: row.name.clone(),
                            toggles: row.toggles,
                            seed,
                            report: r.report,
                        });
                    }
                    Err(e) => errors.lock().unwrap().push(e),
                }
            });
        }
    });

    if let Some(e) = errors.into_inner().unwrap().into_iter().next() {
        return Err(e);
    }
    Ok(results
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|c| c.expect("all cells completed"))
        .collect())
}

/// Mean held-out mAP per combination name, in first-seen order.
pub fn mean_map(cells: &[AblationCell]) -> Vec<(String, f64)> {
    let mut order: Vec<String> = Vec::new();
    let mut sums: std::collections::BTreeMap<String, (f64, usize)> = Default::default();
    for c in cells {
        if !sums.contains_key(&c.name) {
            order.push(c.name.clone());
        }
        let e = sums.entry(c.name.clone()).or_insert((0.0, 0));
        e.0 += c.report.map;
        e.1 += 1;
    }
    order
        .into_iter()
        .map(|name| {
            let (s, n) = sums[&name];
            (name, s / n as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{corrupt, generate_dataset, GeneratorConfig};

    #[test]
    fn grid_shape_and_determinism() {
        let mut cfg = RunConfig::default();
        cfg.generator = GeneratorConfig {
            num_domains: 2,
            videos_per_domain: 1,
            frames_per_video: 10,
            identities_per_video: 3,
            ..GeneratorConfig::default()
        };
        cfg.train.epochs = 1;
        cfg.train.batch_size = 8;
        cfg.eval.holdout_domain = 1;
        let ds = corrupt(&generate_dataset(&cfg.generator).unwrap(), &cfg.generator);
        let rows = &table_rows()[..2];
        let cells = run_grid(&cfg, &ds, rows, &[1, 2], 2).unwrap();
        assert_eq!(cells.len(), 4);
        // Same cell recomputed serially gives the same metrics.
        let again = run_grid(&cfg, &ds, &rows[..1], &[1], 1).unwrap();
        assert_eq!(again[0].report.map, cells[0].report.map);
    }

    #[test]
    fn cumulative_chain_is_ordered() {
        let chain = cumulative_chain();
        assert_eq!(chain.len(), 7);
        assert_eq!(chain[0].name, "baseline");
        assert_eq!(chain[6].name, "full");
        // Each step turns on a superset of the previous step's toggles.
        let count = |t: &Toggles| {
            [t.mdsbn, t.br, t.mlg, t.fd, t.ie, t.id]
                .iter()
                .filter(|b| **b)
                .count()
        };
        for w in chain.windows(2) {
            assert_eq!(count(&w[1].toggles), count(&w[0].toggles) + 1);
        }
    }
}
