//! Finite-difference sweep over every differentiable op, the blocks and the
//! micro network.

use std::io::Write;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::blocks::{Gating, HgConv, HgcnBlock, MambaBlock, MambaConfig, ResidualBlock};
use crate::error::{Error, Result};
use crate::gradcheck::{check_store, CheckOptions};
use crate::loss::{self, Coefficients, LossConfig, LossVariant, RegionPartition, Supervision};
use crate::net::{micro_plan, Network, NetworkPlan};
use crate::nn::{Activation, Conv3dSpec, Ctx, Mode, Module, ParamStore};
use crate::ssm::ScanMode;
use crate::tensor::Tensor;

pub const DEFAULT_RTOL: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scope {
    Op,
    Block,
    Network,
}

impl std::str::FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "op" => Ok(Scope::Op),
            "block" => Ok(Scope::Block),
            "network" => Ok(Scope::Network),
            _ => Err(Error::config(format!("unknown scope `{s}` (op, block, network)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckRow {
    pub scope: Scope,
    pub case: String,
    pub group: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

type Build = Box<dyn Fn(&mut Ctx) -> Result<Var> + Send + Sync>;

struct Case {
    name: String,
    store: ParamStore,
    build: Build,
    mode: Mode,
    scan: ScanMode,
    max_coords: Option<usize>,
}

impl Case {
    fn new(name: impl Into<String>, store: ParamStore, build: impl Fn(&mut Ctx) -> Result<Var> + Send + Sync + 'static) -> Self {
        Self {
            name: name.into(),
            store,
            build: Box::new(build),
            mode: Mode::Train,
            scan: ScanMode::Sequential,
            max_coords: None,
        }
    }
}

/// Inputs in `[lo, hi]` with a random sign, so kinks at 0 stay out of reach.
fn signed(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v = rng.gen_range(lo..hi);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

fn store_of(entries: Vec<(&str, Tensor)>) -> ParamStore {
    let mut s = ParamStore::new();
    for (n, t) in entries {
        s.insert(n, t).expect("distinct names");
    }
    s
}

fn module_store(decls: &impl Module, rng: &mut ChaCha8Rng, extra: Vec<(&str, Tensor)>) -> Result<ParamStore> {
    let mut s = ParamStore::from_decls(&decls.params(), rng)?;
    // perturb every parameter so zero-initialised ones (biases, last convs)
    // are exercised at a generic point
    let names: Vec<String> = s.iter().map(|(n, _)| n.clone()).collect();
    for n in names {
        let t = s.get(&n)?;
        let bumped = Tensor::from_fn(t.shape(), |i| t.data()[i] + rng.gen_range(-0.2..0.2));
        s.set(&n, bumped)?;
    }
    for (n, t) in extra {
        s.insert(n, t)?;
    }
    Ok(s)
}

fn labels(n: usize, classes: usize, rng: &mut ChaCha8Rng) -> Arc<[usize]> {
    (0..n).map(|_| rng.gen_range(0..classes)).collect()
}

fn unary_cases(rng: &mut ChaCha8Rng, cases: &mut Vec<Case>) {
    type F = fn(&mut crate::autodiff::Tape, Var) -> Var;
    let table: [(&str, F, f64, f64); 9] = [
        ("neg", |t, x| t.neg(x), 0.1, 2.0),
        ("exp", |t, x| t.exp(x), 0.1, 1.5),
        ("square", |t, x| t.square(x), 0.1, 2.0),
        ("softplus", |t, x| t.softplus(x), 0.1, 3.0),
        ("sigmoid", |t, x| t.sigmoid(x), 0.1, 3.0),
        ("silu", |t, x| t.silu(x), 0.1, 3.0),
        ("gelu", |t, x| t.gelu(x), 0.1, 3.0),
        ("leaky_relu", |t, x| t.leaky_relu(x, 0.01), 0.05, 2.0),
        ("affine", |t, x| {
            let s = t.scale(x, -1.7);
            t.add_scalar(s, 0.3)
        }, 0.1, 2.0),
    ];
    for (name, f, lo, hi) in table {
        let s = store_of(vec![("x", signed(&[2, 3, 4], lo, hi, rng))]);
        cases.push(Case::new(name, s, move |c| {
            let x = c.param("x")?;
            Ok(f(&mut c.tape, x))
        }));
    }
    let s = store_of(vec![("x", Tensor::uniform(&[2, 3, 4], 0.5, 2.0, rng))]);
    cases.push(Case::new("ln", s, |c| {
        let x = c.param("x")?;
        c.tape.ln(x)
    }));
}

fn op_cases(seed: u64) -> Result<Vec<Case>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut cases = Vec::new();

    for (name, kind) in [("add", 0), ("sub", 1), ("mul", 2), ("div", 3)] {
        let b = if kind == 3 { Tensor::uniform(&[3, 4], 1.0, 2.0, r) } else { Tensor::randn(&[3, 4], 1.0, r) };
        let s = store_of(vec![("a", Tensor::randn(&[2, 3, 4], 1.0, r)), ("b", b)]);
        cases.push(Case::new(format!("{name}_broadcast"), s, move |c| {
            let (a, b) = (c.param("a")?, c.param("b")?);
            match kind {
                0 => c.tape.add(a, b),
                1 => c.tape.sub(b, a),
                2 => c.tape.mul(a, b),
                _ => c.tape.div(a, b),
            }
        }));
    }
    unary_cases(r, &mut cases);

    let s = store_of(vec![("x", Tensor::randn(&[2, 3, 4], 1.0, r))]);
    cases.push(Case::new("sum_mean_sum_axis", s, |c| {
        let x = c.param("x")?;
        let sq = c.tape.square(x);
        let a = c.tape.sum_axis(sq, 1)?;
        let m = c.tape.mean(x);
        let s = c.tape.sum(a);
        let b = c.tape.mul(s, m)?;
        c.tape.add(a, b)
    }));
    let s = store_of(vec![("x", Tensor::randn(&[2, 3, 4], 1.0, r))]);
    cases.push(Case::new("softmax", s, |c| {
        let x = c.param("x")?;
        c.tape.softmax(x, 1)
    }));
    let lab = labels(2 * 4, 3, r);
    let s = store_of(vec![("x", Tensor::randn(&[2, 3, 2, 2], 1.0, r))]);
    cases.push(Case::new("softmax_cross_entropy", s, move |c| {
        let x = c.param("x")?;
        c.tape.softmax_cross_entropy(x, lab.clone())
    }));
    let map: Arc<[usize]> = (0..8).map(|v| (v * 3) % 3).collect();
    let s = store_of(vec![("x", Tensor::randn(&[2, 2, 8], 1.0, r))]);
    cases.push(Case::new("box_sums", s, move |c| {
        let x = c.param("x")?;
        let sq = c.tape.square(x);
        c.tape.box_sums(sq, map.clone(), 3)
    }));

    let s = store_of(vec![("x", Tensor::randn(&[2, 3, 4], 1.0, r)), ("y", Tensor::randn(&[2, 2, 4], 1.0, r))]);
    cases.push(Case::new("reshape_permute_concat_slice_split", s, |c| {
        let (x, y) = (c.param("x")?, c.param("y")?);
        let cat = c.tape.concat(&[x, y], 1)?;
        let p = c.tape.permute(cat, &[2, 0, 1])?;
        let r = c.tape.reshape(p, &[4, 10])?;
        let sl = c.tape.slice(r, 1, 3, 6)?;
        let parts = c.tape.split(sl, 1, &[2, 4])?;
        let sq = c.tape.square(parts[1]);
        c.tape.concat(&[sq, parts[0]], 1)
    }));

    let convs: [(&str, Conv3dSpec, [usize; 5]); 6] = [
        ("conv3d_dense", Conv3dSpec::same(2, 3, 3), [1, 2, 4, 4, 3]),
        ("conv3d_depthwise", Conv3dSpec::same(3, 3, 3).with_groups(3), [1, 3, 3, 4, 3]),
        ("conv3d_grouped_strided", Conv3dSpec::same(4, 2, 3).with_groups(2).with_stride([2, 1, 2]), [1, 4, 4, 3, 4]),
        ("conv3d_stride2_k2", Conv3dSpec::new(2, 3, [2, 2, 2]).with_stride([2, 2, 2]), [2, 2, 4, 4, 2]),
        ("conv3d_pointwise", Conv3dSpec::new(3, 2, [1, 1, 1]), [2, 3, 3, 2, 3]),
        ("conv3d_asymmetric", Conv3dSpec::new(2, 2, [1, 2, 3]).with_padding([0, 1, 1]).with_stride([1, 2, 1]), [1, 2, 3, 4, 4]),
    ];
    for (name, spec, xs) in convs {
        let s = store_of(vec![
            ("x", Tensor::randn(&xs, 1.0, r)),
            ("w", Tensor::randn(&spec.weight_shape(), 0.5, r)),
            ("b", Tensor::randn(&[spec.out_channels], 0.5, r)),
        ]);
        cases.push(Case::new(name, s, move |c| {
            let (x, w, b) = (c.param("x")?, c.param("w")?, c.param("b")?);
            c.tape.conv3d(x, w, Some(b), &spec)
        }));
    }
    let transposed: [(&str, Conv3dSpec, [usize; 5]); 2] = [
        ("conv_transpose3d_k2s2", Conv3dSpec::new(2, 3, [2, 2, 2]).with_stride([2, 2, 2]), [1, 3, 2, 2, 2]),
        ("conv_transpose3d_k3s2", Conv3dSpec::same(2, 2, 3).with_stride([2, 1, 2]), [1, 2, 2, 3, 2]),
    ];
    for (name, spec, xs) in transposed {
        let s = store_of(vec![
            ("x", Tensor::randn(&xs, 1.0, r)),
            ("w", Tensor::randn(&[spec.out_channels, spec.in_channels / spec.groups, spec.kernel[0], spec.kernel[1], spec.kernel[2]], 0.5, r)),
            ("b", Tensor::randn(&[spec.in_channels], 0.5, r)),
        ]);
        cases.push(Case::new(name, s, move |c| {
            let (x, w, b) = (c.param("x")?, c.param("w")?, c.param("b")?);
            c.tape.conv_transpose3d(x, w, Some(b), &spec)
        }));
    }
    for causal in [true, false] {
        let s = store_of(vec![
            ("x", Tensor::randn(&[2, 6, 3], 1.0, r)),
            ("w", Tensor::randn(&[3, 4], 0.5, r)),
            ("b", Tensor::randn(&[3], 0.5, r)),
        ]);
        let name = if causal { "dwconv1d_causal" } else { "dwconv1d_centered" };
        cases.push(Case::new(name, s, move |c| {
            let (x, w, b) = (c.param("x")?, c.param("w")?, c.param("b")?);
            c.tape.dwconv1d_seq(x, w, Some(b), causal)
        }));
    }
    let s = store_of(vec![
        ("x", Tensor::randn(&[2, 3, 2, 2, 2], 1.0, r)),
        ("w", Tensor::randn(&[3, 4], 0.5, r)),
        ("b", Tensor::randn(&[4], 0.5, r)),
    ]);
    cases.push(Case::new("vol_seq_linear", s, |c| {
        let (x, w, b) = (c.param("x")?, c.param("w")?, c.param("b")?);
        let t = c.tape.vol_to_seq(x)?;
        let y = c.tape.linear(t, w, Some(b))?;
        c.tape.seq_to_vol(y, [2, 2, 2])
    }));
    for (name, shape, axis) in [("layer_norm_channels", vec![2, 3, 2, 2, 2], 1), ("layer_norm_tokens", vec![2, 4, 5], 2)] {
        let f = shape[axis];
        let s = store_of(vec![
            ("x", Tensor::randn(&shape, 1.0, r)),
            ("g", Tensor::uniform(&[f], 0.5, 1.5, r)),
            ("b", Tensor::randn(&[f], 0.5, r)),
        ]);
        cases.push(Case::new(name, s, move |c| {
            let (x, g, b) = (c.param("x")?, c.param("g")?, c.param("b")?);
            c.tape.layer_norm(x, g, b, axis, 1e-5)
        }));
    }
    let s = store_of(vec![
        ("x", Tensor::randn(&[2, 3, 2, 2, 1], 1.0, r)),
        ("g", Tensor::uniform(&[3], 0.5, 1.5, r)),
        ("b", Tensor::randn(&[3], 0.5, r)),
    ]);
    cases.push(Case::new("batch_norm_train", s, |c| {
        let (x, g, b) = (c.param("x")?, c.param("g")?, c.param("b")?);
        Ok(c.tape.batch_norm_train(x, g, b, 1e-5)?.0)
    }));
    let (mean, var) = (vec![0.1, -0.3, 0.2], vec![0.8, 1.3, 0.5]);
    let s = store_of(vec![
        ("x", Tensor::randn(&[2, 3, 2, 1, 2], 1.0, r)),
        ("g", Tensor::uniform(&[3], 0.5, 1.5, r)),
        ("b", Tensor::randn(&[3], 0.5, r)),
    ]);
    cases.push(Case::new("batch_norm_eval", s, move |c| {
        let (x, g, b) = (c.param("x")?, c.param("g")?, c.param("b")?);
        c.tape.batch_norm_eval(x, g, b, &mean, &var, 1e-5)
    }));
    for scan in [ScanMode::Sequential, ScanMode::Parallel] {
        let (n, l, e, st) = (2, 9, 2, 3);
        let s = store_of(vec![
            ("x", Tensor::randn(&[n, l, e], 1.0, r)),
            ("dt", Tensor::randn(&[n, l, e], 1.0, r)),
            ("a", Tensor::uniform(&[e, st], -1.0, 1.0, r)),
            ("bm", Tensor::randn(&[n, l, st], 1.0, r)),
            ("cm", Tensor::randn(&[n, l, st], 1.0, r)),
            ("d", Tensor::randn(&[e], 1.0, r)),
        ]);
        let mut case = Case::new(format!("selective_scan_{scan:?}").to_lowercase(), s, |c| {
            let x = c.param("x")?;
            let dt = c.param("dt")?;
            let delta = c.tape.softplus(dt);
            let a = c.param("a")?;
            let ea = c.tape.exp(a);
            let neg = c.tape.neg(ea);
            let (bm, cm, d) = (c.param("bm")?, c.param("cm")?, c.param("d")?);
            c.tape.selective_scan(x, delta, neg, bm, cm, d)
        });
        case.scan = scan;
        cases.push(case);
    }

    // losses take probabilities; feed them through a softmax of free logits
    let lab: Arc<[usize]> = labels(2 * 8, 3, r);
    let logits = Tensor::randn(&[2, 3, 2, 2, 2], 1.0, r);
    let part = RegionPartition::with_box([2, 2, 2], [1, 2, 2])?;
    let coeffs = Coefficients {
        alpha: Tensor::uniform(&[3, 2], 0.1, 0.9, r),
        beta: Tensor::uniform(&[3, 2], 0.1, 0.9, r),
    };
    for kind in ["dice", "tversky", "region_tversky", "region_dice"] {
        let lab = lab.clone();
        let part = part.clone();
        let coeffs = coeffs.clone();
        let s = store_of(vec![("x", logits.clone())]);
        cases.push(Case::new(format!("{kind}_loss"), s, move |c| {
            let x = c.param("x")?;
            let p = c.tape.softmax(x, 1)?;
            match kind {
                "dice" => loss::dice_loss(&mut c.tape, p, &lab, 1e-5),
                "tversky" => loss::tversky_loss(&mut c.tape, p, &lab, 0.3, 0.7, 1e-5),
                "region_dice" => loss::region_dice_loss(&mut c.tape, p, &lab, &part, 1e-5, true),
                _ => loss::region_tversky_loss(&mut c.tape, p, &lab, &part, &coeffs, 1e-5, false),
            }
        }));
    }
    let cfg = LossConfig::compound(LossVariant::RegionTversky, 0.3, 0.7);
    let s = store_of(vec![("x", logits)]);
    cases.push(Case::new("compound_loss", s, move |c| {
        let x = c.param("x")?;
        cfg.loss(&mut c.tape, x, &lab, &part, None)
    }));
    Ok(cases)
}

fn block_cases(seed: u64) -> Result<Vec<Case>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    // smooth everywhere; the leaky kink is covered at op scope
    let act = Activation::Silu;
    let mut cases = Vec::new();

    // channel layer norms over two or three channels sit close to their
    // saturation often enough to defeat central differences
    let res = ResidualBlock::new("res", 2, 5, act);
    let x = Tensor::randn(&[1, 2, 3, 3, 2], 1.0, r);
    let s = module_store(&res, r, vec![("x", x)])?;
    cases.push(Case::new("residual_block", s, move |c| {
        let x = c.param("x")?;
        res.forward(c, x)
    }));

    for (order, gating) in [(2, Gating::Additive), (3, Gating::Multiplicative), (3, Gating::Additive)] {
        let hg = HgConv::new("hg", 4, order, None, gating)?;
        let x = Tensor::randn(&[1, 4, 2, 3, 2], 1.0, r);
        let s = module_store(&hg, r, vec![("x", x)])?;
        cases.push(Case::new(format!("hgconv_n{order}_{gating:?}").to_lowercase(), s, move |c| {
            let x = c.param("x")?;
            hg.forward(c, x)
        }));
    }
    for gating in [Gating::Additive, Gating::Multiplicative] {
        let block = HgcnBlock::new("hgcn", 4, 2, None, gating, act)?;
        let x = Tensor::randn(&[1, 4, 2, 2, 3], 1.0, r);
        let s = module_store(&block, r, vec![("x", x)])?;
        let mut case = Case::new(format!("hgcn_block_{gating:?}").to_lowercase(), s, move |c| {
            let x = c.param("x")?;
            block.forward(c, x)
        });
        case.max_coords = Some(12);
        cases.push(case);
    }
    for scan in [ScanMode::Sequential, ScanMode::Parallel] {
        let cfg = MambaConfig { state_size: 2, mlp_ratio: 2, ..MambaConfig::default() };
        let block = MambaBlock::new("mamba", 4, cfg, act)?;
        let x = Tensor::randn(&[2, 4, 2, 2, 2], 1.0, r);
        let s = module_store(&block, r, vec![("x", x)])?;
        let mut case = Case::new(format!("mamba_block_{scan:?}").to_lowercase(), s, move |c| {
            let x = c.param("x")?;
            block.forward(c, x)
        });
        case.scan = scan;
        case.max_coords = Some(12);
        cases.push(case);
    }
    Ok(cases)
}

fn network_cases(seed: u64) -> Result<Vec<Case>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let plan = NetworkPlan { activation: Activation::Silu, ..micro_plan() };
    let net = Network::new(&plan, 1, 2)?;
    let x = Tensor::randn(&[1, 1, 8, 8, 8], 1.0, r);
    let lab: Vec<usize> = (0..512).map(|_| usize::from(r.gen_bool(0.3))).collect();
    let s = module_store(&net, r, vec![("x", x)])?;
    let extents: Vec<[usize; 3]> = plan.stage_extents().into_iter().take(net.heads.len()).collect();
    let sup = Supervision::new(LossConfig::default(), 2, &extents)?;
    let mut case = Case::new("micro_network", s, move |c| {
        let x = c.param("x")?;
        let logits = net.forward(c, x)?;
        sup.clone().loss(&mut c.tape, &logits, &lab)
    });
    case.max_coords = Some(4);
    Ok(vec![case])
}

/// Every case of `scope` at `seed`, one row per checked tensor.
pub fn run(scope: Scope, seed: u64, rtol: f64) -> Result<Vec<CheckRow>> {
    let cases = match scope {
        Scope::Op => op_cases(seed)?,
        Scope::Block => block_cases(seed)?,
        Scope::Network => network_cases(seed)?,
    };
    let mut rows = Vec::new();
    for case in cases {
        let opts = CheckOptions {
            seed,
            mode: case.mode,
            scan_mode: case.scan,
            max_coords: case.max_coords,
            ..CheckOptions::default()
        };
        for g in check_store(&case.store, &case.build, &opts)? {
            rows.push(CheckRow {
                scope,
                case: case.name.clone(),
                passed: g.max_rel_error <= rtol,
                group: g.name,
                checked: g.checked,
                max_rel_error: g.max_rel_error,
            });
        }
    }
    Ok(rows)
}

/// Names of the cases in a scope, for listings.
pub fn case_names(scope: Scope) -> Result<Vec<String>> {
    let cases = match scope {
        Scope::Op => op_cases(0)?,
        Scope::Block => block_cases(0)?,
        Scope::Network => network_cases(0)?,
    };
    Ok(cases.into_iter().map(|c| c.name).collect())
}

pub const CSV_HEADER: [&str; 6] = ["scope", "case", "group", "checked", "max_rel_error", "passed"];

pub fn write_csv<W: Write>(rows: &[CheckRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in rows {
        let scope = match r.scope {
            Scope::Op => "op",
            Scope::Block => "block",
            Scope::Network => "network",
        };
        w.write_record([
            scope.to_string(),
            r.case.clone(),
            r.group.clone(),
            r.checked.to_string(),
            format!("{:.3e}", r.max_rel_error),
            r.passed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
