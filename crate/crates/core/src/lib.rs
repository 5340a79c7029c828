pub mod encoder;
pub mod evalkit;
pub mod geometry;
pub mod io;
pub mod layout;
pub mod objectives;
pub mod parallel;
pub mod real;
pub mod scenegen;
pub mod seeding;
pub mod trainer;
