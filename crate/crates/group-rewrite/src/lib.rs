pub mod autodiff;
pub mod corpus;
pub mod grouping;
pub mod model;
pub mod synth;
pub mod training;
pub mod oracle;
pub mod rouge;
pub mod gradcheck;
