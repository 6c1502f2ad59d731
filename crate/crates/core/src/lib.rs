pub mod dcnet;
pub mod group;
pub mod keysetup;
pub mod sim;
pub mod splitter;
pub mod verdict;
pub mod zkp;
