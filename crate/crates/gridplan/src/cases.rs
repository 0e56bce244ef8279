//! Bundled study cases: a small 5-bus feeder with hand-picked economics and
//! a seeded generator for the standard 33-bus test feeder.
//!
//! The 5-bus feeder is a chain 0-1-2-3-4 with one flexible consumer and one
//! flexible generator per non-slack node and a 100 kW fixed load each. Two
//! configurations matter in practice: the reserve study (generators active,
//! 1000 kW lines) and the tariff study (no generators, 800 kW lines, lumpy
//! expansion options on every line). Line impedances are uniform and chosen
//! so that marginal losses lift the price at node 3 slightly above its 30 p
//! demand bid in the reserve study, and so that the loss rent collected when
//! line (0,1) is reinforced by half lands a little below the 90 p investment
//! cost in the tariff study. Both studies are sensitive to these constants;
//! change them only together with the acceptance suite.
//!
//! The 33-bus generator embeds the widely used branch/load table (12.66 kV
//! feeder, here on a 12.6 kV, 1 kVA base so per-unit power equals kW) and
//! samples bid prices from seeded normal distributions, which makes every
//! generated case reproducible from its seed.

use crate::network::{
    DemandBid, ExpansionOption, FixedLoad, GenOffer, Line, NetworkCase, Node, TradePrices,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Uniform 5-bus line resistance, p.u. on a 1 kVA base.
///
/// Tuned so the two studies land where they should: marginal losses put the
/// node-3 price a few tenths above a 30 p/kWh import price, and the
/// merchandising surplus under the half-step reinforcement leaves a tariff
/// near 0.014 p/kW once the fixed and per-kW build costs are netted off.
pub const SURROGATE_R_PU: f64 = 1.46e-5;
/// Uniform 5-bus line reactance, p.u. on a 1 kVA base.
pub const SURROGATE_X_PU: f64 = 1.0e-5;

/// Knobs for [`surrogate_5bus`]. `Default` gives the reserve study without
/// reserve payments; use the constructors for the two standard variants.
#[derive(Debug, Clone)]
pub struct Surrogate5Config {
    /// Series resistance per line, p.u.
    pub r_pu: f64,
    /// Series reactance per line, p.u.
    pub x_pu: f64,
    /// Thermal limit per line in both directions, kW.
    pub f_max: f64,
    /// Substation active trade price, p/kWh.
    pub c_p0: f64,
    /// Substation reactive trade price, p/kVArh.
    pub c_q0: f64,
    /// Upward reserve price, p/kWh.
    pub c_up: f64,
    /// Downward reserve price, p/kWh.
    pub c_down: f64,
    /// Include the four flexible generators (offers 20/25/30/35 p).
    pub with_generators: bool,
    /// Non-zero expansion fractions offered on every line (m = 0 is always
    /// present). Empty means no expansion is possible.
    pub expansion_steps: Vec<f64>,
    /// Fixed expansion cost at the m = 1 basis, pence.
    pub k_fix: f64,
    /// Variable expansion cost at the m = 1 basis, p/kW.
    pub k_var: f64,
    /// Residual operating cost to recover, pence.
    pub k_op: f64,
}

impl Default for Surrogate5Config {
    fn default() -> Self {
        Surrogate5Config {
            r_pu: SURROGATE_R_PU,
            x_pu: SURROGATE_X_PU,
            f_max: 1000.0,
            c_p0: 30.0,
            c_q0: 0.0,
            c_up: 0.0,
            c_down: 0.0,
            with_generators: true,
            expansion_steps: Vec::new(),
            k_fix: 100.0,
            k_var: 0.1,
            k_op: 0.0,
        }
    }
}

impl Surrogate5Config {
    /// Reserve study: generators active, no expansions, 1000 kW lines.
    /// The interesting comparison is `c_up = 0` against `c_up = 5`.
    pub fn reserve_study(c_up: f64) -> Self {
        Surrogate5Config { c_up, ..Self::default() }
    }

    /// Tariff study: no generators, 800 kW lines, cheap imports at 5 p/kWh,
    /// and the given non-zero expansion fractions offered on every line.
    pub fn tariff_study(steps: &[f64]) -> Self {
        Surrogate5Config {
            f_max: 800.0,
            c_p0: 5.0,
            with_generators: false,
            expansion_steps: steps.to_vec(),
            ..Self::default()
        }
    }
}

/// Build the 5-bus chain case for the given configuration.
///
/// Nodes 1..4 carry demand bids of 40/35/30/25 p for up to 100 kW each, a
/// 100 kW fixed load each, and (optionally) generation offers of 20/25/30/35
/// p for up to 100 kW each. Node 0 is the substation.
pub fn surrogate_5bus(cfg: Surrogate5Config) -> NetworkCase {
    let denom = cfg.r_pu * cfg.r_pu + cfg.x_pu * cfg.x_pu;
    let a0 = cfg.r_pu / denom;
    let e0 = cfg.x_pu / denom;

    let mut expansions = vec![ExpansionOption { m: 0.0, k_fix: 0.0, k_var: 0.0 }];
    for &m in &cfg.expansion_steps {
        expansions.push(ExpansionOption { m, k_fix: cfg.k_fix, k_var: cfg.k_var });
    }

    let mut nodes = vec![Node { id: 0, v_min: 1.0, v_max: 1.0 }];
    let mut lines = Vec::new();
    let mut demand_bids = Vec::new();
    let mut gen_offers = Vec::new();
    let mut fixed_loads = Vec::new();
    let demand_prices = [40.0, 35.0, 30.0, 25.0];
    let offer_prices = [20.0, 25.0, 30.0, 35.0];

    for n in 1..=4usize {
        nodes.push(Node { id: n, v_min: 0.8, v_max: 1.2 });
        lines.push(Line {
            from: n - 1,
            to: n,
            a0,
            e0,
            f_max: cfg.f_max,
            f_min: cfg.f_max,
            expansions: expansions.clone(),
        });
        fixed_loads.push(FixedLoad { node: n, t: 0, d: 100.0 });
        demand_bids.push(DemandBid {
            id: format!("d{n}"),
            node: n,
            t: 0,
            price: demand_prices[n - 1],
            p_min: 0.0,
            p_max: 100.0,
            q_min: 0.0,
            q_max: 0.0,
        });
        if cfg.with_generators {
            gen_offers.push(GenOffer {
                id: format!("g{n}"),
                node: n,
                t: 0,
                price: offer_prices[n - 1],
                p_min: 0.0,
                p_max: 100.0,
                q_min: 0.0,
                q_max: 0.0,
            });
        }
    }

    NetworkCase {
        name: "surrogate-5bus".into(),
        base_kv: 1.0,
        base_kva: 1.0,
        nodes,
        lines,
        demand_bids,
        gen_offers,
        fixed_loads,
        trade_prices: vec![TradePrices {
            t: 0,
            c_p0: cfg.c_p0,
            c_q0: cfg.c_q0,
            c_up: cfg.c_up,
            c_down: cfg.c_down,
        }],
        k_op: cfg.k_op,
        k_tot: f64::INFINITY,
        chain_constraint: false,
        areas: Vec::new(),
    }
}

/// Branch table of the standard 33-bus radial feeder: from, to, series
/// resistance and reactance in ohms, and the active (kW) / reactive (kVAr)
/// load at the `to` node. Reactive loads are listed for completeness but not
/// used: fixed loads are modeled as active-only.
const IEEE33_BRANCHES: [(usize, usize, f64, f64, f64, f64); 32] = [
    (0, 1, 0.0922, 0.0470, 100.0, 60.0),
    (1, 2, 0.4930, 0.2511, 90.0, 40.0),
    (2, 3, 0.3660, 0.1864, 120.0, 80.0),
    (3, 4, 0.3811, 0.1941, 60.0, 30.0),
    (4, 5, 0.8190, 0.7070, 60.0, 20.0),
    (5, 6, 0.1872, 0.6188, 200.0, 100.0),
    (6, 7, 0.7114, 0.2351, 200.0, 100.0),
    (7, 8, 1.0300, 0.7400, 60.0, 20.0),
    (8, 9, 1.0440, 0.7400, 60.0, 20.0),
    (9, 10, 0.1966, 0.0650, 45.0, 30.0),
    (10, 11, 0.3744, 0.1238, 60.0, 35.0),
    (11, 12, 1.4680, 1.1550, 60.0, 35.0),
    (12, 13, 0.5416, 0.7129, 120.0, 80.0),
    (13, 14, 0.5910, 0.5260, 60.0, 10.0),
    (14, 15, 0.7463, 0.5450, 60.0, 20.0),
    (15, 16, 1.2890, 1.7210, 60.0, 20.0),
    (16, 17, 0.7320, 0.5740, 90.0, 40.0),
    (1, 18, 0.1640, 0.1565, 90.0, 40.0),
    (18, 19, 1.5042, 1.3554, 90.0, 40.0),
    (19, 20, 0.4095, 0.4784, 90.0, 40.0),
    (20, 21, 0.7089, 0.9373, 90.0, 40.0),
    (2, 22, 0.4512, 0.3083, 90.0, 50.0),
    (22, 23, 0.8980, 0.7091, 420.0, 200.0),
    (23, 24, 0.8960, 0.7011, 420.0, 200.0),
    (5, 25, 0.2030, 0.1034, 60.0, 25.0),
    (25, 26, 0.2842, 0.1447, 60.0, 25.0),
    (26, 27, 1.0590, 0.9337, 60.0, 20.0),
    (27, 28, 0.8042, 0.7006, 120.0, 70.0),
    (28, 29, 0.5075, 0.2585, 200.0, 600.0),
    (29, 30, 0.9744, 0.9630, 150.0, 70.0),
    (30, 31, 0.3105, 0.3619, 210.0, 100.0),
    (31, 32, 0.3410, 0.5302, 60.0, 40.0),
];

const IEEE33_BASE_KV: f64 = 12.6;
const IEEE33_BASE_KVA: f64 = 1.0;

/// Knobs for [`ieee33`].
#[derive(Debug, Clone)]
pub struct Ieee33Options {
    /// Offer the doubling option (m = 1) on every line, with the chain rule
    /// that an expanded line needs all upstream lines expanded as well.
    pub expandable: bool,
    /// Thermal limit for every line in both directions, kW.
    pub f_max: f64,
    /// Residual operating cost to recover, pence.
    pub k_op: f64,
}

impl Default for Ieee33Options {
    fn default() -> Self {
        Ieee33Options { expandable: false, f_max: 2000.0, k_op: 0.0 }
    }
}

/// Generate the 33-bus planning case for a given bid-price seed.
///
/// Every loaded node gets one flexible consumer and one flexible generator,
/// each rated at half the node's fixed load. Consumer bids are drawn from
/// N(50, 10²) and generator offers from N(20, 10²), both in p/kWh, clamped
/// at zero. Substation trade is 30 p/kWh for both active and reactive power;
/// reserve is not paid. Doubling a line costs 5000 p fixed plus 1 p/kW of
/// existing rating, so 7000 p per line at the 2000 kW default.
pub fn ieee33(seed: u64, opts: Ieee33Options) -> NetworkCase {
    let z_base = IEEE33_BASE_KV * IEEE33_BASE_KV * 1000.0 / IEEE33_BASE_KVA;

    let mut nodes = vec![Node { id: 0, v_min: 1.0, v_max: 1.0 }];
    for n in 1..=32usize {
        nodes.push(Node { id: n, v_min: 0.8, v_max: 1.2 });
    }

    let mut expansions = vec![ExpansionOption { m: 0.0, k_fix: 0.0, k_var: 0.0 }];
    if opts.expandable {
        expansions.push(ExpansionOption { m: 1.0, k_fix: 5000.0, k_var: 1.0 });
    }

    let mut lines = Vec::with_capacity(32);
    let mut fixed_loads = Vec::with_capacity(32);
    for &(from, to, r_ohm, x_ohm, p_kw, _q_kvar) in &IEEE33_BRANCHES {
        let r = r_ohm / z_base;
        let x = x_ohm / z_base;
        let denom = r * r + x * x;
        lines.push(Line {
            from,
            to,
            a0: r / denom,
            e0: x / denom,
            f_max: opts.f_max,
            f_min: opts.f_max,
            expansions: expansions.clone(),
        });
        fixed_loads.push(FixedLoad { node: to, t: 0, d: p_kw });
    }

    // Fixed draw order: demand price then offer price, node 1 upward, so a
    // seed pins every price regardless of how the case is later consumed.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let demand_dist = Normal::new(50.0, 10.0).expect("valid normal");
    let offer_dist = Normal::new(20.0, 10.0).expect("valid normal");
    let mut demand_bids = Vec::with_capacity(32);
    let mut gen_offers = Vec::with_capacity(32);
    for load in &fixed_loads {
        let c_d = f64::max(demand_dist.sample(&mut rng), 0.0);
        let c_g = f64::max(offer_dist.sample(&mut rng), 0.0);
        let half = load.d / 2.0;
        demand_bids.push(DemandBid {
            id: format!("d{}", load.node),
            node: load.node,
            t: 0,
            price: c_d,
            p_min: 0.0,
            p_max: half,
            q_min: 0.0,
            q_max: 0.0,
        });
        gen_offers.push(GenOffer {
            id: format!("g{}", load.node),
            node: load.node,
            t: 0,
            price: c_g,
            p_min: 0.0,
            p_max: half,
            q_min: 0.0,
            q_max: 0.0,
        });
    }

    NetworkCase {
        name: format!("ieee33-s{seed}{}", if opts.expandable { "-exp" } else { "" }),
        base_kv: IEEE33_BASE_KV,
        base_kva: IEEE33_BASE_KVA,
        nodes,
        lines,
        demand_bids,
        gen_offers,
        fixed_loads,
        trade_prices: vec![TradePrices { t: 0, c_p0: 30.0, c_q0: 30.0, c_up: 0.0, c_down: 0.0 }],
        k_op: opts.k_op,
        k_tot: f64::INFINITY,
        chain_constraint: opts.expandable,
        areas: Vec::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{subtree_nodes, validate_case};

    #[test]
    fn surrogate_default_is_valid_chain() {
        let case = surrogate_5bus(Surrogate5Config::default());
        assert!(validate_case(&case).is_ok());
        let ends: Vec<(usize, usize)> = case.lines.iter().map(|l| (l.from, l.to)).collect();
        assert_eq!(ends, vec![(0, 1), (1, 2), (2, 3), (3, 4)]);
        assert_eq!(case.demand_bids.len(), 4);
        assert_eq!(case.gen_offers.len(), 4);
        assert_eq!(case.fixed_loads.iter().map(|f| f.d).sum::<f64>(), 400.0);
    }

    #[test]
    fn tariff_study_shape() {
        let case = surrogate_5bus(Surrogate5Config::tariff_study(&[0.25, 0.5, 0.75, 1.0]));
        assert!(validate_case(&case).is_ok());
        assert!(case.gen_offers.is_empty());
        assert_eq!(case.lines[0].f_max, 800.0);
        assert_eq!(case.trade_prices[0].c_p0, 5.0);
        for line in &case.lines {
            assert_eq!(line.expansions.len(), 5);
            assert_eq!(line.expansions[0].m, 0.0);
        }
    }

    #[test]
    fn ieee33_shape_and_loads() {
        let case = ieee33(7, Ieee33Options::default());
        assert!(validate_case(&case).is_ok(), "{}", validate_case(&case));
        assert_eq!(case.num_nodes(), 33);
        assert_eq!(case.lines.len(), 32);
        let total: f64 = case.fixed_loads.iter().map(|f| f.d).sum();
        assert_eq!(total, 3715.0);
        // The branch hanging off node 5 belongs to node 3's subtree, which
        // is what makes line (2,3) the post-expansion bottleneck.
        let sub3 = subtree_nodes(&case, 3).unwrap();
        let sub3_load: f64 = case
            .fixed_loads
            .iter()
            .filter(|f| sub3.contains(&f.node))
            .map(|f| f.d)
            .sum();
        assert_eq!(sub3_load, 2235.0);
    }

    #[test]
    fn ieee33_per_unit_conversion() {
        let case = ieee33(7, Ieee33Options::default());
        // First branch: 0.0922 + j0.0470 ohm on a 12.6 kV, 1 kVA base.
        let z_base = 12.6 * 12.6 * 1000.0;
        let r = 0.0922 / z_base;
        let x = 0.0470 / z_base;
        let a = r / (r * r + x * x);
        let e = x / (r * r + x * x);
        assert!((case.lines[0].a0 - a).abs() / a < 1e-12);
        assert!((case.lines[0].e0 - e).abs() / e < 1e-12);
    }

    #[test]
    fn ieee33_seeding_is_reproducible() {
        let a = ieee33(42, Ieee33Options::default());
        let b = ieee33(42, Ieee33Options::default());
        let c = ieee33(43, Ieee33Options::default());
        let prices = |case: &NetworkCase| -> Vec<f64> {
            case.demand_bids
                .iter()
                .map(|d| d.price)
                .chain(case.gen_offers.iter().map(|g| g.price))
                .collect()
        };
        assert_eq!(prices(&a), prices(&b));
        assert_ne!(prices(&a), prices(&c));
        assert!(prices(&a).iter().all(|&p| p >= 0.0));
        // Capacities are half the fixed load at each node.
        for (bid, load) in a.demand_bids.iter().zip(&a.fixed_loads) {
            assert_eq!(bid.node, load.node);
            assert_eq!(bid.p_max, load.d / 2.0);
        }
    }

    #[test]
    fn ieee33_expandable_options() {
        let case = ieee33(7, Ieee33Options { expandable: true, ..Default::default() });
        assert!(case.chain_constraint);
        for line in &case.lines {
            assert_eq!(line.expansions.len(), 2);
            assert_eq!(line.expansions[1].m, 1.0);
            assert_eq!(line.expansions[1].k_fix, 5000.0);
            assert_eq!(line.expansions[1].k_var, 1.0);
        }
    }
}
