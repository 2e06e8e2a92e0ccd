pub mod assimilate;
pub mod evaluate;
pub mod learn;
pub mod simulate;
