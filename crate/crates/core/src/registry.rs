//! Name-based lookup of the interchangeable algorithm variants.

use crate::density::{Atomized, DensityStrategy, Standard};
use crate::error::{Error, Result};
use crate::loss::{DSsimLoss, MsSsimLoss, StructuralLoss};

type Factory<T> = fn() -> Box<T>;

const DENSITY: &[(&str, Factory<dyn DensityStrategy>)] = &[
    ("atomized", || Box::new(Atomized)),
    ("standard", || Box::new(Standard)),
];

const STRUCTURAL: &[(&str, Factory<dyn StructuralLoss>)] = &[
    ("ms-ssim", || Box::new(MsSsimLoss)),
    ("d-ssim", || Box::new(DSsimLoss)),
];

fn lookup<T: ?Sized>(kind: &'static str, table: &[(&str, Factory<T>)], name: &str) -> Result<Box<T>> {
    table
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, make)| make())
        .ok_or_else(|| Error::UnknownStrategy {
            kind,
            name: name.to_string(),
            available: table.iter().map(|(n, _)| *n).collect::<Vec<_>>().join(", "),
        })
}

pub fn density_strategy(name: &str) -> Result<Box<dyn DensityStrategy>> {
    lookup("density strategy", DENSITY, name)
}

pub fn structural_loss(name: &str) -> Result<Box<dyn StructuralLoss>> {
    lookup("structural loss", STRUCTURAL, name)
}

pub fn density_strategy_names() -> Vec<&'static str> {
    DENSITY.iter().map(|(n, _)| *n).collect()
}

pub fn structural_loss_names() -> Vec<&'static str> {
    STRUCTURAL.iter().map(|(n, _)| *n).collect()
}
