pub mod adversary;
pub mod autodiff;
pub mod eval;
pub mod flows;
pub mod game;
pub mod kv;
pub mod metalearner;
pub mod optim;
pub mod tasks;
pub mod theory;
