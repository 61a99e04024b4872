//! The full gradient-check suite: every graph op the model uses, the GRU
//! cell and stack, both losses and the combined training objective on a toy
//! model.

use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{gradient_check_with_fault, GradCheckConfig, GradReport, NamedTensor};
use crate::autodiff::{Fault, Graph, Var};
use crate::data::seeded_rng;
use crate::error::Result;
use crate::gru::{bigru_forward, gru_cell_step, BiGruStack, GruCellParams, GruCellVars, Readout};
use crate::losses::{batch_hard_triplet_graph, OimConfig, OimState, NORM_EPS};
use crate::model::{BackboneConfig, ModelConfig, ModelParams, ModelVars};
use crate::params::Parameters;
use crate::tensor::Tensor;
use crate::trainer::{build_loss, TrainConfig};

#[derive(Clone, Copy, Debug)]
pub struct SuiteConfig {
    pub check: GradCheckConfig,
    /// Random instances per elementary op.
    pub instances: usize,
    pub seed: u64,
    /// Sabotage applied to every analytic pass.
    pub fault: Option<Fault>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            check: GradCheckConfig::default(),
            instances: 10,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ComponentResult {
    pub component: &'static str,
    pub instances: usize,
    /// Worst instance.
    pub report: GradReport,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub results: Vec<ComponentResult>,
    pub tolerance: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.report.passed)
    }

    pub fn failures(&self) -> Vec<&ComponentResult> {
        self.results.iter().filter(|r| !r.report.passed).collect()
    }

    /// Component with the largest relative error.
    pub fn worst(&self) -> Option<&ComponentResult> {
        self.results
            .iter()
            .max_by(|a, b| a.report.max_rel_error.total_cmp(&b.report.max_rel_error))
    }

    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<20} {:>5} {:>12} {:>12}  {:<28} {}\n",
            "component", "runs", "max_rel", "max_abs", "worst_parameter", "status"
        );
        for r in &self.results {
            let status = if r.report.passed { "ok" } else { "FAIL" };
            s += &format!(
                "{:<20} {:>5} {:>12.3e} {:>12.3e}  {:<28} {status}\n",
                r.component, r.instances, r.report.max_rel_error, r.report.max_abs_error, r.report.worst_parameter
            );
            if let Some(f) = &r.report.failure {
                s += &format!("    {f}\n");
            }
        }
        s
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// Values bounded away from zero, so ReLU kinks are never crossed.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn named(items: Vec<(&str, Tensor<f64>)>) -> Vec<NamedTensor> {
    items.into_iter().map(|(n, t)| (n.to_string(), t)).collect()
}

/// `sum(w * x)` with a fixed random `w`, so every output coordinate matters.
fn weighted_sum(g: &mut Graph<f64>, x: Var, w: &Tensor<f64>) -> Result<Var> {
    let wv = g.constant(w.clone());
    let p = g.mul(x, wv)?;
    Ok(g.sum(p))
}

fn probe(g: &Graph<f64>, x: Var, seed: u64) -> Tensor<f64> {
    let mut rng = seeded_rng(seed, 7);
    uniform(&mut rng, g.shape(x), -1.0, 1.0)
}

/// Reduces the output to a scalar with a weight tensor derived from `seed`.
fn reduce(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = probe(g, y, seed);
    weighted_sum(g, y, &w)
}

type Case = (Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>, Vec<NamedTensor>);

struct Component {
    name: &'static str,
    build: Box<dyn Fn(u64) -> Case>,
    instances: usize,
    check: Option<GradCheckConfig>,
}

fn op(name: &'static str, build: impl Fn(u64) -> Case + 'static) -> Component {
    Component {
        name,
        build: Box::new(build),
        instances: 0,
        check: None,
    }
}

fn cell_vars(v: &[Var], hidden_dim: usize) -> GruCellVars {
    GruCellVars {
        w_z: v[0],
        w_r: v[1],
        w_h: v[2],
        u_z: v[3],
        u_r: v[4],
        u_h: v[5],
        b_z: v[6],
        b_r: v[7],
        b_h: v[8],
        hidden_dim,
    }
}

fn random_cell(rng: &mut ChaCha8Rng, din: usize, dh: usize) -> GruCellParams<f64> {
    let mut c = GruCellParams::init(din, dh, rng);
    // nonzero biases exercise the bias paths
    for b in [&mut c.b_z, &mut c.b_r, &mut c.b_h] {
        *b = uniform(rng, &[dh], -0.5, 0.5);
    }
    c
}

/// Small model on a 32x16 input for the end-to-end objective.
pub fn toy_model_config() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            input_hw: [32, 16],
            stage_channels: vec![2, 3, 4],
            stage_strides: vec![2, 1, 1],
            stage_kernels: vec![3, 3, 3],
        },
        part_hidden: 3,
        channel_hidden: 2,
        gru_layers: 3,
        oim_dim: 5,
        readout: Readout::FinalStates,
    }
}

fn end_to_end_case(seed: u64) -> Case {
    let cfg = toy_model_config();
    let mut rng = seeded_rng(seed, 11);
    let mut params = ModelParams::<f64>::init(&cfg, &mut rng).expect("toy config is valid");
    // nonzero biases keep ReLUs away from exact zero inputs on constant regions
    params.visit_mut("", &mut |name, t| {
        if name.ends_with("bias") || name.contains(".b_") {
            *t = uniform(&mut rng, t.shape(), -0.2, 0.2);
        }
    });
    let train_cfg = TrainConfig {
        p: 2,
        k: 2,
        ..TrainConfig::default()
    };
    let targets = vec![0usize, 0, 1, 1];
    let dims = cfg.descriptor_dims();
    let oim_cfg = OimConfig {
        queue_size: 3,
        ..OimConfig::default()
    };
    let states: Vec<OimState<f64>> = [dims.vert, dims.horz, dims.chan, dims.oim]
        .into_iter()
        .map(|d| {
            let mut s = OimState::from_columns(uniform(&mut rng, &[3, d], -1.0, 1.0), &oim_cfg).expect("oim");
            let q: Vec<Tensor<f64>> = (0..2).map(|_| uniform(&mut rng, &[d], -1.0, 1.0)).collect();
            s.push_unlabeled(&q).expect("queue");
            s
        })
        .collect();
    let images = uniform(&mut rng, &[4, 32, 16, 3], 0.0, 1.0);
    let names: Vec<NamedTensor> = params.named("").into_iter().map(|(n, t)| (n, t.clone())).collect();
    let f = move |g: &mut Graph<f64>, v: &[Var]| -> Result<Var> {
        let vars = ModelVars::from_leaves(&params, v)?;
        let x = g.constant(images.clone());
        Ok(build_loss(g, &cfg, &train_cfg, &states, &vars, x, &targets)?.total)
    };
    (Box::new(f), names)
}

fn components() -> Vec<Component> {
    let mut list = vec![
        op("conv2d", |s| {
            let mut r = seeded_rng(s, 1);
            let (stride, pad) = if s % 2 == 0 { (1, 1) } else { (2, 0) };
            let p = named(vec![("input", uniform(&mut r, &[1, 8, 8, 3], -1.0, 1.0)), ("kernel", uniform(&mut r, &[3, 3, 3, 4], -1.0, 1.0))]);
            (
                Box::new(move |g, v| {
                    let y = g.conv2d(v[0], v[1], (stride, stride), (pad, pad))?;
                    reduce(g, y, s)
                }),
                p,
            )
        }),
        op("avg_pool2d", |s| {
            let mut r = seeded_rng(s, 2);
            let k = [(1, 8), (16, 1), (2, 2)][s as usize % 3];
            let p = named(vec![("input", uniform(&mut r, &[16, 8, 3], -1.0, 1.0))]);
            (Box::new(move |g, v| {
                let y = g.avg_pool2d(v[0], k)?;
                reduce(g, y, s)
            }), p)
        }),
        op("global_avg_pool", |s| {
            let mut r = seeded_rng(s, 3);
            let p = named(vec![("input", uniform(&mut r, &[2, 4, 4, 3], -1.0, 1.0))]);
            (Box::new(move |g, v| {
                let y = g.global_avg_pool(v[0])?;
                reduce(g, y, s)
            }), p)
        }),
        op("dense", |s| {
            let mut r = seeded_rng(s, 4);
            let p = named(vec![
                ("x", uniform(&mut r, &[3, 5], -1.0, 1.0)),
                ("weight", uniform(&mut r, &[5, 4], -1.0, 1.0)),
                ("bias", uniform(&mut r, &[4], -1.0, 1.0)),
            ]);
            (Box::new(move |g, v| {
                let y = g.dense(v[0], v[1], v[2])?;
                reduce(g, y, s)
            }), p)
        }),
        op("matmul", |s| {
            let mut r = seeded_rng(s, 5);
            let p = named(vec![("a", uniform(&mut r, &[3, 4], -1.0, 1.0)), ("b", uniform(&mut r, &[4, 5], -1.0, 1.0))]);
            (Box::new(move |g, v| {
                let y = g.matmul(v[0], v[1])?;
                reduce(g, y, s)
            }), p)
        }),
        op("add", |s| {
            let mut r = seeded_rng(s, 6);
            let p = named(vec![("a", uniform(&mut r, &[3, 4], -1.0, 1.0)), ("b", uniform(&mut r, &[3, 4], -1.0, 1.0))]);
            (Box::new(move |g, v| {
                let y = g.add(v[0], v[1])?;
                let y = g.mul(y, y)?;
                reduce(g, y, s)
            }), p)
        }),
        op("mul", |s| {
            let mut r = seeded_rng(s, 7);
            let p = named(vec![("a", uniform(&mut r, &[3, 4], -1.0, 1.0)), ("b", uniform(&mut r, &[3, 4], -1.0, 1.0))]);
            (Box::new(move |g, v| {
                let y = g.mul(v[0], v[1])?;
                reduce(g, y, s)
            }), p)
        }),
        op("sigmoid", |s| {
            let mut r = seeded_rng(s, 8);
            let p = named(vec![("x", uniform(&mut r, &[3, 4], -3.0, 3.0))]);
            (Box::new(move |g, v| {
                let y = g.sigmoid(v[0]);
                reduce(g, y, s)
            }), p)
        }),
        op("tanh", |s| {
            let mut r = seeded_rng(s, 9);
            let p = named(vec![("x", uniform(&mut r, &[3, 4], -3.0, 3.0))]);
            (Box::new(move |g, v| {
                let y = g.tanh(v[0]);
                reduce(g, y, s)
            }), p)
        }),
        op("relu", |s| {
            let mut r = seeded_rng(s, 10);
            let p = named(vec![("x", off_zero(&mut r, &[3, 4]))]);
            (Box::new(move |g, v| {
                let y = g.relu(v[0]);
                reduce(g, y, s)
            }), p)
        }),
        op("concat", |s| {
            let mut r = seeded_rng(s, 11);
            let p = named(vec![("a", uniform(&mut r, &[2, 3], -1.0, 1.0)), ("b", uniform(&mut r, &[2, 4], -1.0, 1.0))]);
            (Box::new(move |g, v| {
                let y = g.concat(&[v[0], v[1]], 1)?;
                reduce(g, y, s)
            }), p)
        }),
        op("reshape", |s| {
            let mut r = seeded_rng(s, 12);
            let p = named(vec![("x", uniform(&mut r, &[2, 6], -1.0, 1.0))]);
            (Box::new(move |g, v| {
                let y = g.reshape(v[0], &[3, 4])?;
                reduce(g, y, s)
            }), p)
        }),
        op("slice_permute", |s| {
            let mut r = seeded_rng(s, 13);
            let p = named(vec![("x", uniform(&mut r, &[2, 3, 4], -1.0, 1.0))]);
            (Box::new(move |g, v| {
                let y = g.permute(v[0], &[2, 0, 1])?;
                let y = g.slice(y, 0, 1, 2)?;
                reduce(g, y, s)
            }), p)
        }),
        op("l2_normalize", |s| {
            let mut r = seeded_rng(s, 14);
            let p = named(vec![("x", uniform(&mut r, &[3, 5], -1.0, 1.0))]);
            (Box::new(move |g, v| {
                let y = g.l2_normalize(v[0], NORM_EPS);
                reduce(g, y, s)
            }), p)
        }),
        op("softmax", |s| {
            let mut r = seeded_rng(s, 15);
            let p = named(vec![("x", uniform(&mut r, &[3, 5], -1.0, 1.0))]);
            (Box::new(move |g, v| {
                let y = g.softmax(v[0], 0.5);
                reduce(g, y, s)
            }), p)
        }),
        op("log_softmax", |s| {
            let mut r = seeded_rng(s, 16);
            let p = named(vec![("x", uniform(&mut r, &[3, 5], -1.0, 1.0))]);
            (Box::new(move |g, v| {
                let y = g.log_softmax(v[0], 0.1);
                reduce(g, y, s)
            }), p)
        }),
        op("pairwise_distance", |s| {
            let mut r = seeded_rng(s, 17);
            let p = named(vec![("a", uniform(&mut r, &[4, 3], -1.0, 1.0)), ("b", uniform(&mut r, &[5, 3], -1.0, 1.0))]);
            (Box::new(move |g, v| {
                let y = g.pairwise_distance(v[0], v[1])?;
                reduce(g, y, s)
            }), p)
        }),
        op("gather_sum_mean", |s| {
            let mut r = seeded_rng(s, 18);
            let p = named(vec![("x", uniform(&mut r, &[3, 4], -1.0, 1.0))]);
            (Box::new(move |g, v| {
                let picked = g.gather(v[0], &[0, 5, 5, 11])?;
                let sq = g.mul(picked, picked)?;
                let a = g.mean(sq);
                let b = g.sum(v[0]);
                let b = g.scale(b, 0.3);
                let t = g.add(a, b)?;
                Ok(g.add_scalar(t, 1.0))
            }), p)
        }),
        op("gru_cell", |s| {
            let mut r = seeded_rng(s, 19);
            let cell = random_cell(&mut r, 4, 3);
            let mut p: Vec<NamedTensor> = cell.named("cell").into_iter().map(|(n, t)| (n, t.clone())).collect();
            p.push(("x".into(), uniform(&mut r, &[4], -1.0, 1.0)));
            p.push(("h_prev".into(), uniform(&mut r, &[3], -1.0, 1.0)));
            (Box::new(move |g, v| {
                let c = cell_vars(&v[..9], 3);
                let h = gru_cell_step(g, &c, v[9], v[10])?;
                reduce(g, h, s)
            }), p)
        }),
    ];
    for c in list.iter_mut() {
        c.instances = 10;
    }
    list.push(Component {
        name: "bigru_stack",
        instances: 3,
        check: None,
        build: Box::new(|s| {
            let t_len = [1, 3, 8][s as usize % 3];
            let mut r = seeded_rng(s, 20);
            let mut stack = BiGruStack::<f64>::init(3, 2, 3, &mut r);
            for layer in stack.layers.iter_mut() {
                for cell in [&mut layer.forward, &mut layer.backward] {
                    for b in [&mut cell.b_z, &mut cell.b_r, &mut cell.b_h] {
                        *b = uniform(&mut r, &[2], -0.5, 0.5);
                    }
                }
            }
            let seq: Vec<Tensor<f64>> = (0..t_len).map(|_| uniform(&mut r, &[3], -1.0, 1.0)).collect();
            let mut p: Vec<NamedTensor> = stack.named("gru").into_iter().map(|(n, t)| (n, t.clone())).collect();
            for (i, x) in seq.iter().enumerate() {
                p.push((format!("x{i}"), x.clone()));
            }
            let n_params = p.len() - t_len;
            (Box::new(move |g, v| {
                let vars = crate::gru::BiGruVars {
                    layers: v[..n_params]
                        .chunks(18)
                        .map(|c| (cell_vars(&c[..9], 2), cell_vars(&c[9..], 2)))
                        .collect(),
                };
                let out = bigru_forward(g, &vars, &v[n_params..])?;
                let f = out.readout(g, Readout::FinalStates)?;
                let first = out.outputs[0];
                let a = reduce(g, f, s)?;
                let b = reduce(g, first, s + 1)?;
                g.add(a, b)
            }), p)
        }),
    });
    list.push(Component {
        name: "oim_loss",
        instances: 10,
        check: None,
        build: Box::new(|s| {
            let mut r = seeded_rng(s, 21);
            let cfg = OimConfig {
                queue_size: 3,
                ..OimConfig::default()
            };
            let mut state = OimState::from_columns(uniform(&mut r, &[5, 6], -1.0, 1.0), &cfg).expect("oim");
            let q: Vec<Tensor<f64>> = (0..(s as usize % 4)).map(|_| uniform(&mut r, &[6], -1.0, 1.0)).collect();
            state.push_unlabeled(&q).expect("queue");
            let targets: Vec<usize> = (0..4).map(|_| r.gen_range(0..5)).collect();
            let p = named(vec![("features", uniform(&mut r, &[4, 6], -1.0, 1.0))]);
            (Box::new(move |g, v| {
                let u = g.l2_normalize(v[0], NORM_EPS);
                state.loss_graph(g, u, &targets)
            }), p)
        }),
    });
    list.push(Component {
        name: "batch_hard_triplet",
        instances: 10,
        check: None,
        build: Box::new(|s| {
            let mut r = seeded_rng(s, 22);
            let p = named(vec![("embeddings", uniform(&mut r, &[6, 3], -1.0, 1.0))]);
            (Box::new(move |g, v| batch_hard_triplet_graph(g, v[0], &[0, 0, 1, 1, 2, 2], 0.5)), p)
        }),
    });
    list.push(Component {
        name: "end_to_end",
        instances: 1,
        check: Some(GradCheckConfig {
            max_coords: Some(6),
            ..GradCheckConfig::default()
        }),
        build: Box::new(end_to_end_case),
    });
    list
}

pub const COMPONENTS: usize = 23;

/// Names of the checked components, in run order.
pub fn component_names() -> Vec<&'static str> {
    components().iter().map(|c| c.name).collect()
}

pub fn run_suite(cfg: &SuiteConfig) -> SuiteReport {
    run_selected(cfg, |_| true)
}

/// Runs the components whose name satisfies `keep`.
pub fn run_selected(cfg: &SuiteConfig, keep: impl Fn(&str) -> bool) -> SuiteReport {
    let mut results = Vec::new();
    for comp in components().into_iter().filter(|c| keep(c.name)) {
        let t0 = Instant::now();
        let check = GradCheckConfig {
            seed: cfg.seed,
            ..comp.check.unwrap_or(cfg.check)
        };
        let runs = if comp.instances == 1 { 1 } else { comp.instances.min(cfg.instances.max(1)).max(comp.instances.min(3)) };
        let mut worst: Option<GradReport> = None;
        for i in 0..runs {
            let (f, params) = (comp.build)(cfg.seed.wrapping_mul(1000).wrapping_add(i as u64));
            let r = gradient_check_with_fault(f, &params, &check, cfg.fault);
            let replace = match &worst {
                None => true,
                Some(w) => (!r.passed && w.passed) || r.max_rel_error > w.max_rel_error,
            };
            if replace {
                worst = Some(r);
            }
        }
        results.push(ComponentResult {
            component: comp.name,
            instances: runs,
            report: worst.expect("at least one run"),
            seconds: t0.elapsed().as_secs_f64(),
        });
    }
    SuiteReport {
        results,
        tolerance: cfg.check.tolerance,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::OpKind;

    #[test]
    fn component_count_matches() {
        assert_eq!(component_names().len(), COMPONENTS);
    }

    #[test]
    fn elementary_ops_pass() {
        let cfg = SuiteConfig {
            instances: 3,
            ..SuiteConfig::default()
        };
        let report = run_selected(&cfg, |n| n != "end_to_end");
        assert!(report.passed(), "{}", report.table());
    }

    #[test]
    fn sabotaged_tanh_is_caught() {
        let cfg = SuiteConfig {
            instances: 3,
            fault: Some(Fault {
                kind: OpKind::Tanh,
                factor: 1.01,
            }),
            ..SuiteConfig::default()
        };
        let report = run_selected(&cfg, |n| n == "tanh" || n == "relu");
        let failing: Vec<_> = report.failures().iter().map(|r| r.component).collect();
        assert_eq!(failing, vec!["tanh"]);
    }

    #[test]
    fn end_to_end_objective_passes() {
        let report = run_selected(&SuiteConfig::default(), |n| n == "end_to_end");
        assert!(report.passed(), "{}", report.table());
    }
}
