//! Channel-permutation and duplicate-entry properties of the hypernetworks.
//! Each check returns `(name, max abs difference)`; all should sit below
//! [`TOL`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use wla::griddata::{synth_generate, GridField, NormStats, PvsMeta, SynthParams};
use wla::numerics::ParamStore;
use wla::pvum::{unify_forward, MapRole, MetaHypernet, PvumConfig};

pub const TOL: f64 = 1e-5;

pub type Checks = Vec<(&'static str, f64)>;

pub struct Nets {
    pub ps: ParamStore<f32>,
    pub fwd: MetaHypernet,
    pub inv: MetaHypernet,
}

pub fn nets(seed: u64) -> Nets {
    let mut ps = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = PvumConfig::desk();
    let fwd = MetaHypernet::new(&mut ps, &mut rng, "enc", cfg, MapRole::Forward).unwrap();
    let inv = MetaHypernet::new(&mut ps, &mut rng, "dec", cfg, MapRole::Inverse).unwrap();
    Nets { ps, fwd, inv }
}

fn max_abs(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).abs()).fold(0.0, f64::max)
}

fn normalized_field(meta: &PvsMeta, h: usize, w: usize, seed: u64) -> GridField {
    let x = synth_generate(meta, h, w, seed, SynthParams::default()).unwrap();
    NormStats::fit(std::slice::from_ref(&x)).unwrap().normalize(&x).unwrap()
}

pub fn equivariance(meta: &PvsMeta, perm: &[usize], seed: u64) -> Checks {
    let Nets { ps, fwd, inv } = nets(seed);
    let (h, w) = (8, 16);
    let pm = meta.permuted(perm).unwrap();
    let x = normalized_field(meta, h, w, seed);
    let px = x.select(&pm).unwrap();

    let m = fwd.generate_mapping(&ps, meta).unwrap();
    let pmap = fwd.generate_mapping(&ps, &pm).unwrap();
    let y = unify_forward(&x, &m).unwrap();
    let py = unify_forward(&px, &pmap).unwrap();

    let mut w_rows = 0f64;
    for (i, &p) in perm.iter().enumerate() {
        w_rows = w_rows.max(max_abs(pmap.w.row(i), m.w.row(p)));
    }

    let back = inv.unify_inverse(&ps, &y, meta, h, w).unwrap();
    let pback = inv.unify_inverse(&ps, &y, &pm, h, w).unwrap();
    let inv_map = inv.generate_mapping(&ps, meta).unwrap();
    let inv_pmap = inv.generate_mapping(&ps, &pm).unwrap();
    let permuted_bias: Vec<f32> = perm.iter().map(|&p| inv_map.b.data()[p]).collect();

    vec![
        ("forward output invariant under joint permutation", max_abs(y.data(), py.data())),
        ("forward bias invariant under permutation", max_abs(m.b.data(), pmap.b.data())),
        ("forward weight rows follow the permutation", w_rows),
        ("inverse output channels follow the permutation", max_abs(pback.values(), back.select(&pm).unwrap().values())),
        ("inverse bias follows the permutation", max_abs(inv_pmap.b.data(), &permuted_bias)),
    ]
}

/// Repeats entry `dup` of `meta` at the end of the list and compares the rows.
pub fn duplicate_rows(meta: &PvsMeta, dup: usize, seed: u64) -> Checks {
    let Nets { ps, fwd, inv } = nets(seed);
    let mut entries = meta.entries().to_vec();
    entries.push(entries[dup]);
    let last = entries.len() - 1;
    let f = fwd.generate_for_entries(&ps, &entries).unwrap();
    let i = inv.generate_for_entries(&ps, &entries).unwrap();
    vec![
        ("forward rows of duplicated entries", max_abs(f.w.row(dup), f.w.row(last))),
        ("inverse rows of duplicated entries", max_abs(i.w.row(dup), i.w.row(last))),
        ("inverse bias of duplicated entries", (i.b.data()[dup] as f64 - i.b.data()[last] as f64).abs()),
    ]
}

/// Two independently built hypernetworks with the same seed, and two calls
/// on one network, must agree exactly.
pub fn determinism(meta: &PvsMeta, seed: u64) -> Checks {
    let a = nets(seed);
    let b = nets(seed);
    let m1 = a.fwd.generate_mapping(&a.ps, meta).unwrap();
    let m2 = a.fwd.generate_mapping(&a.ps, meta).unwrap();
    let m3 = b.fwd.generate_mapping(&b.ps, meta).unwrap();
    let i1 = a.inv.generate_mapping(&a.ps, meta).unwrap();
    let i3 = b.inv.generate_mapping(&b.ps, meta).unwrap();
    vec![
        ("repeated generation", max_abs(m1.w.data(), m2.w.data()).max(max_abs(m1.b.data(), m2.b.data()))),
        ("same seed, forward", max_abs(m1.w.data(), m3.w.data()).max(max_abs(m1.b.data(), m3.b.data()))),
        ("same seed, inverse", max_abs(i1.w.data(), i3.w.data()).max(max_abs(i1.b.data(), i3.b.data()))),
    ]
}

/// Everything the acceptance suite runs, on a mixed upper-air and surface
/// subset.
pub fn all() -> Checks {
    let meta = PvsMeta::parse_list("z500,t850,u850,v850,t2m,msl,q700").unwrap();
    let mut out = equivariance(&meta, &[3, 0, 6, 2, 5, 1, 4], 5);
    out.extend(duplicate_rows(&meta, 1, 5));
    out.extend(duplicate_rows(&meta, 4, 6));
    out.extend(determinism(&meta, 7));
    out
}
