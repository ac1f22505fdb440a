//! Core of an on-premises autograder for LaTeX coursework.
//!
//! Stages: [`ingest`] loads a submission export, [`texparse`] and
//! [`segment`] split each source into per-problem work, [`grade`] applies a
//! binary rubric through the [`llm`] gateway, and [`ledger`] plus [`report`]
//! record scores and produce student feedback.

pub mod config;
pub mod grade;
pub mod ingest;
pub mod ledger;
pub mod llm;
pub mod report;
pub mod segment;
pub mod texparse;

#[cfg(feature = "testkit")]
pub mod testkit;
