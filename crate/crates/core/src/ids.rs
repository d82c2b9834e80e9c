use std::fmt;

use serde::{Deserialize, Serialize};

/// Identifier of an agent (an independent image source).
pub type AgentId = u32;

/// Identifier of one image. Engine images pack `(agent_id, frame_id)` as
/// `agent_id << 32 | frame_id`, so ordering groups images by agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ImageId(pub u64);

impl ImageId {
    pub fn from_agent_frame(agent: AgentId, frame: u32) -> Self {
        ImageId(((agent as u64) << 32) | frame as u64)
    }

    pub fn agent(self) -> AgentId {
        (self.0 >> 32) as AgentId
    }

    pub fn frame(self) -> u32 {
        self.0 as u32
    }
}

impl fmt::Display for ImageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PointId(pub u64);

impl fmt::Display for PointId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SubmapId(pub u32);

impl fmt::Display for SubmapId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}
