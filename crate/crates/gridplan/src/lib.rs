//! Distribution network expansion planning with coexisting fixed and nodal
//! pricing.
//!
//! The crate models a radial distribution grid whose operator chooses line
//! reinforcements and a uniform network tariff while a nodal spot market
//! clears underneath. The bilevel structure is reformulated exactly into a
//! single mixed-integer second-order-cone program, solved by branch and
//! bound, and settled back into per-participant payments.

pub mod case;
pub mod cases;
pub mod conic;
pub mod market;
pub mod network;
pub mod reform;
pub mod tariff;
