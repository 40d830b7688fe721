pub mod certify;
pub mod polynomial;
pub mod sdp;
pub mod smr;
pub mod sos;
pub mod verify;
