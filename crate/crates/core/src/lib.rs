//! Toolkit for predicting the next screen of a mobile GUI from an action, and
//! for using those predictions to pick actions.

pub mod agent;
pub mod backend;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod image;
pub mod parallel;
pub mod parse;
pub mod prompts;
pub mod render;
pub mod symbols;
pub mod synthetic;
pub mod world_model;

pub use error::{Error, Result};
pub use image::{ActionCommand, ActionInstruction, BBox, Episode, EpisodeStep, GuiImage, Rgb, Split, TextBox};
