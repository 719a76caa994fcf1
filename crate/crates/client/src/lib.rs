// SPDX-License-Identifier: MIT OR Apache-2.0

//! Wire types of the steering service and, with the default `http`
//! feature, a blocking client for them.

pub mod api;
#[cfg(feature = "http")]
mod client;

pub use api::{
    Clamp, ErrorBody, FeatureRange, FenceInfo, GenerateRequest, GenerateResponse, LegendEntry, ModelInfo,
    ModelSummary, TraceRequest, TraceResponse,
};
#[cfg(feature = "http")]
pub use client::{Client, ClientError};
