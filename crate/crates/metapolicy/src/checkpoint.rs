//! Textual checkpoint format for policies and sampled hybrid worlds.
//!
//! Line-oriented, versioned, locale-independent. Floats are written in
//! scientific notation with 17 significant digits, which round-trips every
//! finite f64 exactly. Arrays appear as a declaration line
//! `array <name> <ndims> <dims...>` followed by one line of row-major values.
//! Meta policies nest their selector and basis blocks recursively.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::basis::{QFunction, RbfFeatureMap};
use crate::error::{Error, Result};
use crate::hybrid::{HybridConfig, HybridWorld, LinearSystem, LqrPolicy, VoronoiPartition};
use crate::nn::{GruPolicy, MlpPolicy, NetPolicy, ObsNormalizer, ParamBundle};
use crate::policy::{MetaPolicy, PolicyHandle, PolicyKind};

const POLICY_MAGIC: &str = "metapolicy-checkpoint v1";
const WORLD_MAGIC: &str = "metapolicy-world v1";

fn write_floats(out: &mut String, values: &[f64]) {
    let mut first = true;
    for v in values {
        if !first {
            out.push(' ');
        }
        write!(out, "{v:.16e}").unwrap();
        first = false;
    }
    out.push('\n');
}

fn write_array(out: &mut String, name: &str, shape: &[usize], values: &[f64]) {
    write!(out, "array {name} {}", shape.len()).unwrap();
    for d in shape {
        write!(out, " {d}").unwrap();
    }
    out.push('\n');
    write_floats(out, values);
}

fn write_params(out: &mut String, params: &ParamBundle) {
    for e in params.entries() {
        write_array(out, &e.name, &e.shape, &e.data);
    }
}

fn write_normalizer(out: &mut String, n: &ObsNormalizer) {
    write!(out, "normalizer-lo").unwrap();
    for v in &n.lo {
        write!(out, " {v:.16e}").unwrap();
    }
    out.push('\n');
    write!(out, "normalizer-hi").unwrap();
    for v in &n.hi {
        write!(out, " {v:.16e}").unwrap();
    }
    out.push('\n');
}

fn write_policy_block(out: &mut String, handle: &PolicyHandle) {
    writeln!(out, "begin-policy {}", handle.kind_name()).unwrap();
    writeln!(out, "seed {}", handle.seed).unwrap();
    writeln!(out, "trained-on {}", handle.trained_on).unwrap();
    match &handle.kind {
        PolicyKind::Mlp(p) => {
            writeln!(
                out,
                "arch {} {} {} {}",
                p.input_dim, p.hidden_dims.0, p.hidden_dims.1, p.output_dim
            )
            .unwrap();
            write_normalizer(out, &p.normalizer);
            write_params(out, &p.params);
        }
        PolicyKind::Gru(p) => {
            writeln!(out, "arch {} {} {}", p.input_dim, p.hidden_dim, p.output_dim).unwrap();
            write_normalizer(out, &p.normalizer);
            write_params(out, &p.params);
        }
        PolicyKind::GreedyQ(q) => {
            writeln!(
                out,
                "arch {} {} {}",
                q.n_actions, q.features.n_centers, q.features.dim
            )
            .unwrap();
            write_array(out, "bandwidths", &[q.features.dim], &q.features.bandwidths);
            write_array(out, "box-lo", &[q.features.dim], &q.features.lo);
            write_array(out, "box-hi", &[q.features.dim], &q.features.hi);
            write_array(
                out,
                "centers",
                &[q.features.n_centers, q.features.dim],
                &q.features.centers,
            );
            write_array(
                out,
                "weights",
                &[q.n_actions, q.features.n_centers],
                &q.weights,
            );
        }
        PolicyKind::Lqr(k) => {
            writeln!(out, "arch {} {}", k.gain.nrows(), k.gain.ncols()).unwrap();
            let gain: Vec<f64> = k.gain.transpose().iter().cloned().collect(); // row-major
            write_array(out, "gain", &[k.gain.nrows(), k.gain.ncols()], &gain);
            let goal: Vec<f64> = k.goal.iter().cloned().collect();
            write_array(out, "goal", &[k.goal.len()], &goal);
        }
        PolicyKind::Distractor { action_count } => {
            writeln!(out, "arch {action_count}").unwrap();
        }
        PolicyKind::Meta(m) => {
            writeln!(out, "arch {}", m.basis.len()).unwrap();
            write_policy_block(out, &net_as_handle(&m.selector));
            for b in &m.basis {
                write_policy_block(out, b);
            }
        }
    }
    writeln!(out, "end-policy").unwrap();
}

fn net_as_handle(net: &NetPolicy) -> PolicyHandle {
    PolicyHandle::new(match net.clone() {
        NetPolicy::Mlp(p) => PolicyKind::Mlp(p),
        NetPolicy::Gru(p) => PolicyKind::Gru(p),
    })
}

/// Serialize a policy handle to the textual checkpoint format.
pub fn policy_to_string(handle: &PolicyHandle) -> String {
    let mut out = String::new();
    writeln!(out, "{POLICY_MAGIC}").unwrap();
    write_policy_block(&mut out, handle);
    out
}

pub fn save_policy(handle: &PolicyHandle, path: &Path) -> Result<()> {
    std::fs::write(path, policy_to_string(handle))?;
    Ok(())
}

pub fn load_policy(path: &Path) -> Result<PolicyHandle> {
    let text = std::fs::read_to_string(path)?;
    policy_from_string(&text)
}

/// Line cursor over checkpoint text.
struct Lines<'a> {
    lines: std::str::Lines<'a>,
    current: usize,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str) -> Self {
        Self {
            lines: text.lines(),
            current: 0,
        }
    }

    fn next(&mut self) -> Result<&'a str> {
        self.current += 1;
        self.lines
            .next()
            .ok_or_else(|| Error::format(format!("unexpected end of file at line {}", self.current)))
    }

    fn expect_tag<'b>(&mut self, tag: &str) -> Result<&'a str> {
        let line = self.next()?;
        line.strip_prefix(tag)
            .map(|rest| rest.trim_start())
            .ok_or_else(|| {
                Error::format(format!(
                    "expected `{tag}` at line {}, found `{line}`",
                    self.current
                ))
            })
    }
}

fn parse_floats(line: &str, expected: usize, what: &str) -> Result<Vec<f64>> {
    let values: Vec<f64> = line
        .split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| Error::format(format!("bad float `{t}` in {what}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if values.len() != expected {
        return Err(Error::format(format!(
            "shape mismatch in {what}: expected {expected} values, found {}",
            values.len()
        )));
    }
    Ok(values)
}

fn parse_usizes(line: &str, what: &str) -> Result<Vec<usize>> {
    line.split_whitespace()
        .map(|t| {
            t.parse::<usize>()
                .map_err(|_| Error::format(format!("bad integer `{t}` in {what}")))
        })
        .collect()
}

fn read_array(lines: &mut Lines<'_>, name: &str) -> Result<(Vec<usize>, Vec<f64>)> {
    let decl = lines.expect_tag("array")?;
    let mut parts = decl.split_whitespace();
    let found = parts
        .next()
        .ok_or_else(|| Error::format("array declaration missing a name"))?;
    if found != name {
        return Err(Error::format(format!(
            "expected array `{name}`, found `{found}`"
        )));
    }
    let ndims: usize = parts
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| Error::format(format!("array `{name}` missing rank")))?;
    let shape: Vec<usize> = parts
        .map(|t| {
            t.parse::<usize>()
                .map_err(|_| Error::format(format!("bad dimension in array `{name}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    if shape.len() != ndims {
        return Err(Error::format(format!(
            "array `{name}` declares {ndims} dims but lists {}",
            shape.len()
        )));
    }
    let count: usize = shape.iter().product();
    let values = parse_floats(lines.next()?, count, &format!("array `{name}`"))?;
    Ok((shape, values))
}

fn read_params(lines: &mut Lines<'_>, names: &[&str]) -> Result<ParamBundle> {
    let mut params = ParamBundle::new();
    for name in names {
        let (shape, values) = read_array(lines, name)?;
        params.push(name, shape, values);
    }
    Ok(params)
}

fn read_normalizer(lines: &mut Lines<'_>, dim: usize) -> Result<ObsNormalizer> {
    let lo = parse_floats(lines.expect_tag("normalizer-lo")?, dim, "normalizer-lo")?;
    let hi = parse_floats(lines.expect_tag("normalizer-hi")?, dim, "normalizer-hi")?;
    Ok(ObsNormalizer::new(lo, hi))
}

fn read_policy_block(lines: &mut Lines<'_>) -> Result<PolicyHandle> {
    let kind_name = lines.expect_tag("begin-policy")?.to_string();
    let seed: u64 = lines
        .expect_tag("seed")?
        .parse()
        .map_err(|_| Error::format("bad seed"))?;
    let trained_on = lines.expect_tag("trained-on")?.to_string();
    let arch = parse_usizes(lines.expect_tag("arch")?, "arch")?;

    let kind = match kind_name.as_str() {
        "mlp" => {
            let [input, h1, h2, output] = arch[..] else {
                return Err(Error::format("mlp arch needs 4 integers"));
            };
            let normalizer = read_normalizer(lines, input)?;
            let params = read_params(lines, &["w1", "b1", "w2", "b2", "w3", "b3"])?;
            PolicyKind::Mlp(MlpPolicy::from_parts(input, (h1, h2), output, normalizer, params))
        }
        "gru" => {
            let [input, hidden, output] = arch[..] else {
                return Err(Error::format("gru arch needs 3 integers"));
            };
            let normalizer = read_normalizer(lines, input)?;
            let params = read_params(lines, &["wz", "bz", "wr", "br", "wc", "bc", "wo", "bo"])?;
            PolicyKind::Gru(GruPolicy::from_parts(input, hidden, output, normalizer, params))
        }
        "greedy-q" => {
            let [n_actions, n_centers, dim] = arch[..] else {
                return Err(Error::format("greedy-q arch needs 3 integers"));
            };
            let (_, bandwidths) = read_array(lines, "bandwidths")?;
            let (_, lo) = read_array(lines, "box-lo")?;
            let (_, hi) = read_array(lines, "box-hi")?;
            let (cshape, centers) = read_array(lines, "centers")?;
            if cshape != [n_centers, dim] {
                return Err(Error::format("centers shape mismatch with arch"));
            }
            let (wshape, weights) = read_array(lines, "weights")?;
            if wshape != [n_actions, n_centers] {
                return Err(Error::format("weights shape mismatch with arch"));
            }
            PolicyKind::GreedyQ(QFunction {
                features: RbfFeatureMap {
                    centers,
                    n_centers,
                    dim,
                    bandwidths,
                    lo,
                    hi,
                },
                weights,
                n_actions,
            })
        }
        "lqr" => {
            let [m, d] = arch[..] else {
                return Err(Error::format("lqr arch needs 2 integers"));
            };
            let (_, gain) = read_array(lines, "gain")?;
            let (_, goal) = read_array(lines, "goal")?;
            if gain.len() != m * d || goal.len() != d {
                return Err(Error::format("lqr gain/goal shape mismatch"));
            }
            PolicyKind::Lqr(LqrPolicy {
                gain: DMatrix::from_row_slice(m, d, &gain),
                goal: DVector::from_row_slice(&goal),
            })
        }
        "distractor" => {
            let [action_count] = arch[..] else {
                return Err(Error::format("distractor arch needs 1 integer"));
            };
            PolicyKind::Distractor { action_count }
        }
        "meta" => {
            let [basis_count] = arch[..] else {
                return Err(Error::format("meta arch needs 1 integer"));
            };
            let selector_handle = read_policy_block(lines)?;
            let selector = match selector_handle.kind {
                PolicyKind::Mlp(p) => NetPolicy::Mlp(p),
                PolicyKind::Gru(p) => NetPolicy::Gru(p),
                _ => return Err(Error::format("meta selector must be mlp or gru")),
            };
            let basis = (0..basis_count)
                .map(|_| read_policy_block(lines))
                .collect::<Result<Vec<_>>>()?;
            PolicyKind::Meta(MetaPolicy { selector, basis })
        }
        other => {
            return Err(Error::format(format!("unknown policy kind `{other}`")));
        }
    };
    lines.expect_tag("end-policy")?;
    Ok(PolicyHandle {
        kind,
        trained_on,
        seed,
    })
}

/// Parse a policy checkpoint; version mismatches, truncation, and shape
/// mismatches produce distinct format errors.
pub fn policy_from_string(text: &str) -> Result<PolicyHandle> {
    let mut lines = Lines::new(text);
    let magic = lines.next()?;
    if magic != POLICY_MAGIC {
        return Err(Error::format(format!(
            "unsupported checkpoint version: `{magic}` (expected `{POLICY_MAGIC}`)"
        )));
    }
    read_policy_block(&mut lines)
}

/// Serialize a sampled hybrid world (systems, controllers, partition).
pub fn world_to_string(world: &HybridWorld) -> String {
    let mut out = String::new();
    writeln!(out, "{WORLD_MAGIC}").unwrap();
    writeln!(out, "world-seed {}", world.world_seed).unwrap();
    writeln!(
        out,
        "config {}",
        toml::to_string(&world.cfg)
            .expect("hybrid config serializes")
            .replace('\n', ";")
    )
    .unwrap();
    writeln!(out, "systems {}", world.systems.len()).unwrap();
    for (i, sys) in world.systems.iter().enumerate() {
        let (d, m) = (sys.a.nrows(), sys.b.ncols());
        let a: Vec<f64> = sys.a.transpose().iter().cloned().collect();
        write_array(&mut out, &format!("a{i}"), &[d, d], &a);
        let b: Vec<f64> = sys.b.transpose().iter().cloned().collect();
        write_array(&mut out, &format!("b{i}"), &[d, m], &b);
        let gain = &world.controllers[i].gain;
        let k: Vec<f64> = gain.transpose().iter().cloned().collect();
        write_array(&mut out, &format!("k{i}"), &[gain.nrows(), gain.ncols()], &k);
    }
    let goal: Vec<f64> = world.controllers[0].goal.iter().cloned().collect();
    write_array(&mut out, "goal", &[goal.len()], &goal);
    writeln!(out, "partition {}", world.partition.seeds.len()).unwrap();
    let xs: Vec<f64> = world.partition.seeds.iter().map(|s| s.0).collect();
    write_array(&mut out, "seeds-x", &[xs.len()], &xs);
    let ys: Vec<f64> = world.partition.seeds.iter().map(|s| s.1).collect();
    write_array(&mut out, "seeds-y", &[ys.len()], &ys);
    write!(out, "labels").unwrap();
    for l in &world.partition.labels {
        write!(out, " {l}").unwrap();
    }
    out.push('\n');
    writeln!(out, "end-world").unwrap();
    out
}

pub fn world_from_string(text: &str) -> Result<HybridWorld> {
    let mut lines = Lines::new(text);
    let magic = lines.next()?;
    if magic != WORLD_MAGIC {
        return Err(Error::format(format!(
            "unsupported world version: `{magic}` (expected `{WORLD_MAGIC}`)"
        )));
    }
    let world_seed: u64 = lines
        .expect_tag("world-seed")?
        .parse()
        .map_err(|_| Error::format("bad world seed"))?;
    let cfg_text = lines.expect_tag("config")?.replace(';', "\n");
    let cfg: HybridConfig = toml::from_str(&cfg_text)
        .map_err(|e| Error::format(format!("bad embedded config: {e}")))?;
    let n_systems: usize = lines
        .expect_tag("systems")?
        .parse()
        .map_err(|_| Error::format("bad system count"))?;

    let mut systems = Vec::with_capacity(n_systems);
    let mut gains = Vec::with_capacity(n_systems);
    for i in 0..n_systems {
        let (ashape, a) = read_array(&mut lines, &format!("a{i}"))?;
        let (bshape, b) = read_array(&mut lines, &format!("b{i}"))?;
        let (kshape, k) = read_array(&mut lines, &format!("k{i}"))?;
        systems.push(LinearSystem {
            a: DMatrix::from_row_slice(ashape[0], ashape[1], &a),
            b: DMatrix::from_row_slice(bshape[0], bshape[1], &b),
        });
        gains.push(DMatrix::from_row_slice(kshape[0], kshape[1], &k));
    }
    let (_, goal) = read_array(&mut lines, "goal")?;
    let controllers = gains
        .into_iter()
        .map(|gain| LqrPolicy {
            gain,
            goal: DVector::from_row_slice(&goal),
        })
        .collect();
    let n_seeds: usize = lines
        .expect_tag("partition")?
        .parse()
        .map_err(|_| Error::format("bad partition size"))?;
    let (_, xs) = read_array(&mut lines, "seeds-x")?;
    let (_, ys) = read_array(&mut lines, "seeds-y")?;
    if xs.len() != n_seeds || ys.len() != n_seeds {
        return Err(Error::format("partition seed count mismatch"));
    }
    let labels = parse_usizes(lines.expect_tag("labels")?, "labels")?;
    if labels.len() != n_seeds {
        return Err(Error::format("partition label count mismatch"));
    }
    lines.expect_tag("end-world")?;
    Ok(HybridWorld {
        cfg,
        systems,
        controllers,
        partition: VoronoiPartition {
            seeds: xs.into_iter().zip(ys).collect(),
            labels,
        },
        world_seed,
    })
}

pub fn save_world(world: &HybridWorld, path: &Path) -> Result<()> {
    std::fs::write(path, world_to_string(world))?;
    Ok(())
}

pub fn load_world(path: &Path) -> Result<HybridWorld> {
    world_from_string(&std::fs::read_to_string(path)?)
}
