//! Settlement economics on top of a cleared market: area fixed prices,
//! merchandising surplus, the revenue-adequate charge, and the operator's
//! ledger.
//!
//! Everything here is a pure function of a [`MarketProblem`] and its
//! [`MarketSolution`]. Quantities stay in natural units (kW, p/kWh, pence
//! with one-hour periods); report types that mirror published tables
//! convert to pounds at [`PENCE_PER_POUND`].

use serde::Serialize;
use thiserror::Error;

use crate::market::{MarketProblem, MarketSolution};
use crate::network::NetworkCase;
use crate::reform::charging_base;

pub const PENCE_PER_POUND: f64 = 100.0;

#[derive(Debug, Error)]
pub enum TariffError {
    /// An averaged fixed price needs a positive fixed load to weight by.
    #[error("area {nodes:?} carries no fixed load over the horizon")]
    ZeroFixedLoad { nodes: Vec<usize> },
    /// Costs remain after merchandising but nobody is connected to charge.
    #[error("{shortfall:.3} p of costs remain and the charging base is zero")]
    UnrecoverableCosts { shortfall: f64 },
}

/// Load-weighted average of the nodal prices seen by fixed demand in
/// `area`, p/kWh: the uniform price collecting the same total payment as
/// nodal settlement would.
pub fn fixed_area_price(
    prob: &MarketProblem,
    sol: &MarketSolution,
    area: &[usize],
) -> Result<f64, TariffError> {
    let case = &prob.case;
    let mut paid = 0.0;
    let mut volume = 0.0;
    for (ti, &t) in prob.index.times.iter().enumerate() {
        for &n in area {
            if n == 0 {
                continue;
            }
            let d: f64 = case
                .fixed_loads
                .iter()
                .filter(|f| f.node == n && f.t == t)
                .map(|f| f.d)
                .sum();
            paid += sol.pi_p[ti][n - 1] * d;
            volume += d;
        }
    }
    if volume <= 0.0 {
        return Err(TariffError::ZeroFixedLoad { nodes: area.to_vec() });
    }
    Ok(paid / volume)
}

/// Nodal and averaged prices of one clearing.
#[derive(Debug, Clone, Serialize)]
pub struct PriceReport {
    /// Period labels, in solve order.
    pub times: Vec<usize>,
    /// Active nodal price per `[time][node-1]`, p/kWh.
    pub pi_p: Vec<Vec<f64>>,
    /// Reactive nodal price per `[time][node-1]`, p/kVArh.
    pub pi_q: Vec<Vec<f64>>,
    /// Areas after the single-area default is applied.
    pub areas: Vec<Vec<usize>>,
    /// Averaged fixed price per area, p/kWh.
    pub area_price: Vec<f64>,
    /// `area price − nodal price` per `[time][node-1]`. Positive at nodes
    /// whose locational price is low: they fund the high-priced ones.
    pub subsidy: Vec<Vec<f64>>,
}

pub fn price_report(prob: &MarketProblem, sol: &MarketSolution) -> Result<PriceReport, TariffError> {
    let case = &prob.case;
    let areas = case.effective_areas();
    let mut area_price = Vec::with_capacity(areas.len());
    for area in &areas {
        area_price.push(fixed_area_price(prob, sol, area)?);
    }
    let mut area_of = vec![None; case.num_nodes()];
    for (ai, area) in areas.iter().enumerate() {
        for &n in area {
            area_of[n] = Some(ai);
        }
    }
    let nt = prob.index.times.len();
    let mut subsidy = vec![vec![0.0; case.num_nodes() - 1]; nt];
    for (ti, row) in subsidy.iter_mut().enumerate() {
        for n in 1..case.num_nodes() {
            if let Some(ai) = area_of[n] {
                row[n - 1] = area_price[ai] - sol.pi_p[ti][n - 1];
            }
        }
    }
    Ok(PriceReport {
        times: prob.index.times.clone(),
        pi_p: sol.pi_p.clone(),
        pi_q: sol.pi_q.clone(),
        areas,
        area_price,
        subsidy,
    })
}

/// The operator's trading income computed two independent ways, pence.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct MerchandisingSurplus {
    /// Price-weighted injections: what consumers pay minus what generators
    /// and the upstream grid collect.
    pub dual_route: f64,
    /// The settlement identity: fixed-load payments plus participant bound
    /// rents and reserve-adjusted bid values. Linear in the market
    /// variables, hence usable inside the planner.
    pub linear_route: f64,
}

impl MerchandisingSurplus {
    pub fn value(&self) -> f64 {
        self.dual_route
    }

    /// Relative disagreement between the two routes.
    pub fn spread(&self) -> f64 {
        (self.dual_route - self.linear_route).abs() / 1.0_f64.max(self.dual_route.abs())
    }
}

pub fn merchandising_surplus(prob: &MarketProblem, sol: &MarketSolution) -> MerchandisingSurplus {
    let case = &prob.case;
    let mut dual = 0.0;
    let mut linear = 0.0;
    for (ti, &t) in prob.index.times.iter().enumerate() {
        let tp = case.trade_price(t).expect("validated period");
        let trade = tp.c_p0 * sol.p[ti][0] + tp.c_q0 * sol.q[ti][0];
        dual -= trade;
        linear -= trade;
        for n in 1..case.num_nodes() {
            dual -= sol.pi_p[ti][n - 1] * sol.p[ti][n];
            let d_fixed: f64 = case
                .fixed_loads
                .iter()
                .filter(|f| f.node == n && f.t == t)
                .map(|f| f.d)
                .sum();
            linear += sol.pi_p[ti][n - 1] * d_fixed;
        }
        for (k, bid) in case.demand_bids.iter().enumerate() {
            if bid.t == t {
                linear += -sol.phi_d_p_max[k] * bid.p_max
                    + sol.phi_d_p_min[k] * bid.p_min
                    + (bid.price + tp.c_up - tp.c_down) * sol.d_p[k];
            }
        }
        for (k, offer) in case.gen_offers.iter().enumerate() {
            if offer.t == t {
                linear += -sol.phi_g_p_max[k] * offer.p_max
                    + sol.phi_g_p_min[k] * offer.p_min
                    - (offer.price + tp.c_up - tp.c_down) * sol.g_p[k];
            }
        }
    }
    MerchandisingSurplus { dual_route: dual, linear_route: linear }
}

/// The adequacy formula on bare numbers: the smallest nonnegative charge
/// covering `invest + k_op` after `ms` of merchandising income, spread
/// over `base` kW of connected capacity.
pub fn floor_from(ms: f64, invest: f64, k_op: f64, base: f64) -> Result<f64, TariffError> {
    let shortfall = invest + k_op - ms;
    if shortfall <= 0.0 {
        return Ok(0.0);
    }
    if base <= 0.0 {
        return Err(TariffError::UnrecoverableCosts { shortfall });
    }
    Ok(shortfall / base)
}

/// The smallest nonnegative uniform charge that recovers investment plus
/// residual costs after merchandising income, p/kW per hour.
pub fn tariff_floor(prob: &MarketProblem, sol: &MarketSolution) -> Result<f64, TariffError> {
    let ms = merchandising_surplus(prob, sol).value();
    let invest: f64 = prob.params.iter().map(|p| p.total_cost()).sum();
    floor_from(ms, invest, prob.case.k_op, charging_base(&prob.case))
}

/// Participant-side settlement split the way the published comparisons
/// are, pounds.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SurplusTable {
    /// `(bid − nodal price) · allocation` over flexible demand.
    pub consumer_surplus: f64,
    /// Upward reserve pays accepted demand; downward pays the headroom.
    pub consumer_reserve_revenue: f64,
    /// `(nodal price − offer) · allocation` over flexible generation.
    pub producer_surplus: f64,
    /// Upward reserve pays spare capacity; downward pays the output.
    pub producer_reserve_revenue: f64,
}

impl SurplusTable {
    pub fn total(&self) -> f64 {
        self.consumer_surplus
            + self.consumer_reserve_revenue
            + self.producer_surplus
            + self.producer_reserve_revenue
    }
}

pub fn welfare_report(prob: &MarketProblem, sol: &MarketSolution) -> SurplusTable {
    let case = &prob.case;
    let mut cs = 0.0;
    let mut cr = 0.0;
    let mut ps = 0.0;
    let mut pr = 0.0;
    for (ti, &t) in prob.index.times.iter().enumerate() {
        let tp = case.trade_price(t).expect("validated period");
        for (k, bid) in case.demand_bids.iter().enumerate() {
            if bid.t == t {
                let pi = sol.pi_p[ti][bid.node - 1];
                cs += (bid.price - pi) * sol.d_p[k];
                cr += tp.c_up * sol.d_p[k] + tp.c_down * (bid.p_max - sol.d_p[k]);
            }
        }
        for (k, offer) in case.gen_offers.iter().enumerate() {
            if offer.t == t {
                let pi = sol.pi_p[ti][offer.node - 1];
                ps += (pi - offer.price) * sol.g_p[k];
                pr += tp.c_up * (offer.p_max - sol.g_p[k]) + tp.c_down * sol.g_p[k];
            }
        }
    }
    SurplusTable {
        consumer_surplus: cs / PENCE_PER_POUND,
        consumer_reserve_revenue: cr / PENCE_PER_POUND,
        producer_surplus: ps / PENCE_PER_POUND,
        producer_reserve_revenue: pr / PENCE_PER_POUND,
    }
}

/// The planner objective split into its five groups, pence.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ObjectiveDecomposition {
    /// Gross value of flexible trades: bid-weighted demand minus
    /// offer-weighted generation.
    pub flexible_surplus: f64,
    /// Income from the substation exchange (imports cost, exports earn).
    pub node0_trade: f64,
    /// Reserve capacity payments from the upstream grid.
    pub reserve_revenue: f64,
    /// Charge levied on everyone's connection capacity.
    pub tariff_total: f64,
    /// Fixed plus variable cost of the chosen reinforcements.
    pub investment_cost: f64,
}

impl ObjectiveDecomposition {
    pub fn total(&self) -> f64 {
        self.flexible_surplus + self.node0_trade + self.reserve_revenue
            - self.tariff_total
            - self.investment_cost
    }
}

/// What the operator collects and spends at a plan, pence.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct RevenueLedger {
    pub merchandising: f64,
    pub tariff_revenue: f64,
    pub k_op: f64,
    pub fixed_cost: f64,
    pub variable_cost: f64,
}

impl RevenueLedger {
    pub fn profit(&self) -> f64 {
        self.merchandising + self.tariff_revenue - self.k_op - self.fixed_cost - self.variable_cost
    }
}

/// One chosen reinforcement assignment with its charge and money flows.
#[derive(Debug, Clone, Serialize)]
pub struct ExpansionPlan {
    /// Option index per line, in case line order.
    pub assignment: Vec<usize>,
    /// Uniform capacity charge, p/kW per hour.
    pub tau: f64,
    pub objective: ObjectiveDecomposition,
    pub ledger: RevenueLedger,
}

/// Settle a cleared market into a plan: the minimal adequate charge, the
/// objective split, and the operator ledger.
pub fn settle_plan(prob: &MarketProblem, sol: &MarketSolution) -> Result<ExpansionPlan, TariffError> {
    let case = &prob.case;
    let tau = tariff_floor(prob, sol)?;
    let base = charging_base(case);
    let ms = merchandising_surplus(prob, sol).value();

    let mut flexible = 0.0;
    let mut trade = 0.0;
    let mut reserve = 0.0;
    for (ti, &t) in prob.index.times.iter().enumerate() {
        let tp = case.trade_price(t).expect("validated period");
        trade -= tp.c_p0 * sol.p[ti][0] + tp.c_q0 * sol.q[ti][0];
        for (k, bid) in case.demand_bids.iter().enumerate() {
            if bid.t == t {
                flexible += bid.price * sol.d_p[k];
            }
        }
        for (k, offer) in case.gen_offers.iter().enumerate() {
            if offer.t == t {
                flexible -= offer.price * sol.g_p[k];
            }
        }
        reserve += tp.c_up * sol.r_up[ti].iter().sum::<f64>()
            + tp.c_down * sol.r_down[ti].iter().sum::<f64>();
    }
    let fixed_cost: f64 = prob.params.iter().map(|p| p.k_fix_cost).sum();
    let variable_cost: f64 = prob.params.iter().map(|p| p.k_var_cost).sum();

    Ok(ExpansionPlan {
        assignment: prob.assignment.clone(),
        tau,
        objective: ObjectiveDecomposition {
            flexible_surplus: flexible,
            node0_trade: trade,
            reserve_revenue: reserve,
            tariff_total: tau * base,
            investment_cost: fixed_cost + variable_cost,
        },
        ledger: RevenueLedger {
            merchandising: ms,
            tariff_revenue: tau * base,
            k_op: case.k_op,
            fixed_cost,
            variable_cost,
        },
    })
}

/// Σ fixed demand per (time index, node), kW, shaped like the price grids.
pub fn fixed_load_grid(case: &NetworkCase, times: &[usize]) -> Vec<Vec<f64>> {
    times
        .iter()
        .map(|&t| {
            (1..case.num_nodes())
                .map(|n| {
                    case.fixed_loads
                        .iter()
                        .filter(|f| f.node == n && f.t == t)
                        .map(|f| f.d)
                        .sum()
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cases::{surrogate_5bus, Surrogate5Config};
    use crate::conic::{solver_for, Backend, SolveOptions};
    use crate::market::{build_lower_level, solve_market};

    fn clear(cfg: Surrogate5Config, u: &[usize]) -> (MarketProblem, MarketSolution) {
        let case = surrogate_5bus(cfg);
        let prob = build_lower_level(&case, u).unwrap();
        let solver = solver_for(Backend::Clarabel);
        let sol = solve_market(&prob, solver.as_ref(), &SolveOptions::default()).unwrap();
        (prob, sol)
    }

    /// A problem shell and a hand-written price field, for testing the
    /// averaging arithmetic without a solve.
    fn synthetic_prices(pi: Vec<f64>, loads: Vec<f64>) -> (MarketProblem, MarketSolution) {
        let mut case = surrogate_5bus(Surrogate5Config::tariff_study(&[0.5]));
        case.fixed_loads = loads
            .iter()
            .enumerate()
            .filter(|(_, &d)| d != 0.0)
            .map(|(i, &d)| crate::network::FixedLoad { node: i + 1, t: 0, d })
            .collect();
        let prob = build_lower_level(&case, &[0, 0, 0, 0]).unwrap();
        let sol = MarketSolution { pi_p: vec![pi], ..Default::default() };
        (prob, sol)
    }

    #[test]
    fn area_price_is_the_load_weighted_average() {
        // Constant prices average to themselves.
        let (prob, sol) = synthetic_prices(vec![20.0; 4], vec![50.0, 10.0, 5.0, 1.0]);
        let got = fixed_area_price(&prob, &sol, &[1, 2, 3, 4]).unwrap();
        assert!((got - 20.0).abs() < 1e-12);

        // A zero-weight node contributes nothing.
        let (prob, sol) = synthetic_prices(vec![10.0, 99.0, 0.0, 0.0], vec![100.0, 0.0, 0.0, 0.0]);
        let got = fixed_area_price(&prob, &sol, &[1, 2]).unwrap();
        assert!((got - 10.0).abs() < 1e-12);

        // Published four-node average: equal weights, prices as reported.
        let (prob, sol) =
            synthetic_prices(vec![34.63, 35.00, 34.98, 35.23], vec![100.0; 4]);
        let got = fixed_area_price(&prob, &sol, &[1, 2, 3, 4]).unwrap();
        assert!((got - 34.96).abs() < 0.005, "{got}");

        // No load at all is an error, not a zero division.
        let (prob, sol) = synthetic_prices(vec![10.0; 4], vec![0.0; 4]);
        assert!(matches!(
            fixed_area_price(&prob, &sol, &[1, 2, 3, 4]),
            Err(TariffError::ZeroFixedLoad { .. })
        ));
    }

    #[test]
    fn subsidies_cancel_within_an_area() {
        let (prob, sol) = clear(Surrogate5Config::reserve_study(0.0), &[0, 0, 0, 0]);
        let report = price_report(&prob, &sol).unwrap();
        let loads = fixed_load_grid(&prob.case, &prob.index.times);
        for (ai, area) in report.areas.iter().enumerate() {
            let mut net = 0.0;
            let mut weight = 0.0;
            for ti in 0..report.times.len() {
                for &n in area {
                    net += report.subsidy[ti][n - 1] * loads[ti][n - 1];
                    weight += loads[ti][n - 1];
                }
            }
            assert!(weight > 0.0);
            assert!(net.abs() < 1e-9 * weight, "area {ai} keeps {net} pence");
        }
        // Prices rise along the feeder, so the head of the feeder subsidises
        // the tail.
        assert!(report.subsidy[0][0] > 0.0);
        assert!(report.subsidy[0][3] < 0.0);
    }

    #[test]
    fn merchandising_routes_agree() {
        for (cfg, u) in [
            (Surrogate5Config::reserve_study(0.0), [0, 0, 0, 0]),
            (Surrogate5Config::reserve_study(5.0), [0, 0, 0, 0]),
            (Surrogate5Config::tariff_study(&[0.5, 1.0]), [1, 0, 0, 0]),
        ] {
            let (prob, sol) = clear(cfg, &u);
            let ms = merchandising_surplus(&prob, &sol);
            assert!(
                ms.spread() <= 1e-6,
                "dual {:.6} vs linear {:.6}",
                ms.dual_route,
                ms.linear_route
            );
        }
    }

    #[test]
    fn ledger_arithmetic_on_published_numbers() {
        // 88 p of merchandising against 25 + 20 p of costs: no charge, and
        // the lumpiness profit is exactly the 43 p difference.
        assert_eq!(floor_from(88.0, 45.0, 0.0, 800.0).unwrap(), 0.0);
        let ledger = RevenueLedger {
            merchandising: 88.0,
            tariff_revenue: 0.0,
            k_op: 0.0,
            fixed_cost: 25.0,
            variable_cost: 20.0,
        };
        assert_eq!(ledger.profit(), 43.0);

        // Underwater by 12 p over an 800 kW base: the floor is the exact
        // quotient (the published 0.014 came from rounded inputs).
        let tau = floor_from(78.0, 90.0, 0.0, 800.0).unwrap();
        assert_eq!(tau, 12.0 / 800.0);
        assert!((tau - 0.014).abs() < 0.002);

        // Costs with nobody connected cannot be recovered.
        assert!(matches!(
            floor_from(0.0, 10.0, 0.0, 0.0),
            Err(TariffError::UnrecoverableCosts { .. })
        ));
    }

    #[test]
    fn solved_tariff_ledgers() {
        // Quarter-step expansion menu: merchandising alone overshoots the
        // 45 p spend, so no charge is levied and the surplus is kept.
        let (prob, sol) =
            clear(Surrogate5Config::tariff_study(&[0.25, 0.5, 0.75, 1.0]), &[1, 0, 0, 0]);
        let plan = settle_plan(&prob, &sol).unwrap();
        assert_eq!(plan.tau, 0.0);
        assert!((plan.ledger.fixed_cost - 25.0).abs() < 1e-9);
        assert!((plan.ledger.variable_cost - 20.0).abs() < 1e-9);
        assert!(plan.ledger.merchandising > 45.0);
        let kept = plan.ledger.merchandising - 45.0;
        assert!((plan.ledger.profit() - kept).abs() < 1e-9);

        // Half-step menu: 90 p of spend against ~78 p of merchandising
        // leaves ~12 p to collect over an 800 kW base.
        let (prob, sol) = clear(Surrogate5Config::tariff_study(&[0.5, 1.0]), &[1, 0, 0, 0]);
        let plan = settle_plan(&prob, &sol).unwrap();
        assert!((plan.ledger.merchandising - 78.0).abs() < 0.6, "{}", plan.ledger.merchandising);
        assert!((plan.ledger.fixed_cost - 50.0).abs() < 1e-9);
        assert!((plan.ledger.variable_cost - 40.0).abs() < 1e-9);
        assert!((plan.tau - 0.014).abs() < 0.002, "{}", plan.tau);
        assert!(plan.ledger.profit().abs() < 1e-6, "floor means zero profit");
    }

    /// The published reserve-comparison rows, placed on the case shell as a
    /// hand-written solution. Prices and allocations per node 1..4.
    fn published_reserve_solution(
        c_up: f64,
        pi: [f64; 4],
        d: [f64; 4],
        g: [f64; 4],
    ) -> (MarketProblem, MarketSolution) {
        let case = surrogate_5bus(Surrogate5Config::reserve_study(c_up));
        let prob = build_lower_level(&case, &[0, 0, 0, 0]).unwrap();
        let sol = MarketSolution {
            pi_p: vec![pi.to_vec()],
            d_p: d.to_vec(),
            g_p: g.to_vec(),
            ..Default::default()
        };
        (prob, sol)
    }

    #[test]
    fn published_surplus_arithmetic() {
        // No reserve price: surpluses only.
        let (prob, sol) = published_reserve_solution(
            0.0,
            [30.36, 30.54, 30.51, 30.67],
            [100.0, 100.0, 0.0, 0.0],
            [100.0, 100.0, 100.0, 0.0],
        );
        let table = welfare_report(&prob, &sol);
        assert!((table.consumer_surplus - 14.1).abs() < 0.05, "{}", table.consumer_surplus);
        assert!((table.producer_surplus - 16.4).abs() < 0.05, "{}", table.producer_surplus);
        assert_eq!(table.consumer_reserve_revenue, 0.0);
        assert_eq!(table.producer_reserve_revenue, 0.0);
        assert!((table.total() - 30.5).abs() < 0.1);

        // Reserve at 5 p: node 3 flips, reserve revenue appears.
        let (prob, sol) = published_reserve_solution(
            5.0,
            [30.62, 30.80, 31.08, 31.24],
            [100.0, 100.0, 100.0, 0.0],
            [100.0, 100.0, 0.0, 0.0],
        );
        let table = welfare_report(&prob, &sol);
        assert!((table.consumer_surplus - 12.5).abs() < 0.05, "{}", table.consumer_surplus);
        assert!((table.producer_surplus - 16.4).abs() < 0.05, "{}", table.producer_surplus);
        assert!((table.consumer_reserve_revenue - 15.0).abs() < 0.01);
        assert!((table.producer_reserve_revenue - 10.0).abs() < 0.01);
        assert!((table.total() - 53.9).abs() < 0.1);
    }

    #[test]
    fn solved_reserve_revenues_are_quantity_pinned() {
        // On the solved surrogate the c_up = 5 allocations sit at their
        // bounds, so the reserve payments are exact money amounts even
        // though the surrogate's prices differ from the published ones.
        let (prob, sol) = clear(Surrogate5Config::reserve_study(5.0), &[0, 0, 0, 0]);
        let table = welfare_report(&prob, &sol);
        assert!((table.consumer_reserve_revenue - 15.0).abs() < 0.01);
        assert!((table.producer_reserve_revenue - 10.0).abs() < 0.01);

        let (prob, sol) = clear(Surrogate5Config::reserve_study(0.0), &[0, 0, 0, 0]);
        let table = welfare_report(&prob, &sol);
        assert_eq!(table.consumer_reserve_revenue, 0.0);
        assert_eq!(table.producer_reserve_revenue, 0.0);
        // Surpluses land near the published ones by construction of the
        // surrogate, but only the qualitative claim is owed here.
        assert!(table.consumer_surplus > 0.0 && table.producer_surplus > 0.0);
    }

    #[test]
    fn objective_decomposition_matches_the_clearing() {
        let (prob, sol) = clear(Surrogate5Config::tariff_study(&[0.5, 1.0]), &[1, 0, 0, 0]);
        let plan = settle_plan(&prob, &sol).unwrap();
        // The first three groups are exactly the market objective; the
        // charge and investment then come off the top.
        let welfare = plan.objective.flexible_surplus
            + plan.objective.node0_trade
            + plan.objective.reserve_revenue;
        assert!((welfare - sol.objective).abs() < 1e-5, "{welfare} vs {}", sol.objective);
        let want = sol.objective - plan.objective.tariff_total - plan.objective.investment_cost;
        assert!((plan.objective.total() - want).abs() < 1e-9);
        assert!(plan.tau >= 0.0);
        assert!(plan.ledger.profit() >= -1e-9);
    }
}
