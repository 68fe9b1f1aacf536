pub mod analysis;
pub mod codec;
pub mod corpus;
pub mod dygen;
pub mod model;
pub mod nn;
pub mod objective;
pub mod par;
pub mod seeds;
pub mod trainloop;
