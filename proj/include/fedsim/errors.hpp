#pragma once

#include <stdexcept>
#include <string>

namespace fedsim {

struct Error : std::runtime_error {
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Parameter store / wire format
struct ShapeMismatch : Error { using Error::Error; };
struct NonFiniteValue : Error { using Error::Error; };
struct TruncatedPayload : Error { using Error::Error; };
struct BadMagic : Error { using Error::Error; };
struct UnknownVersion : Error { using Error::Error; };
struct MalformedPayload : Error { using Error::Error; };

// Optimizers / training
struct EmptyRound : Error { using Error::Error; };
struct InvalidHyperparameter : Error { using Error::Error; };
struct EpochOutOfRange : Error { using Error::Error; };
struct DivergedLoss : Error { using Error::Error; };
struct EmptyDataset : Error { using Error::Error; };

// Secure channel
struct RngFailure : Error { using Error::Error; };
struct KeyTooSmall : Error { using Error::Error; };
struct EncryptFailure : Error { using Error::Error; };
struct DecryptFailure : Error { using Error::Error; };
struct AuthFailure : Error { using Error::Error; };
// A round-counter mismatch is an authentication problem: the header claims a
// round the key does not belong to. Kept as a subtype so callers can either
// treat it uniformly or distinguish stale keys from forged payloads.
struct RoundMismatch : AuthFailure { using AuthFailure::AuthFailure; };
struct NonceReuseDetected : Error { using Error::Error; };

// Protocol / transport
struct Timeout : Error { using Error::Error; };
struct TransportClosed : Error { using Error::Error; };
struct ClientFailure : Error { using Error::Error; };
struct EmptyEvalSet : Error { using Error::Error; };

// Partitioning
struct UnmatchedSamples : Error { using Error::Error; };
struct OverlappingRules : Error { using Error::Error; };
struct UnknownClass : Error { using Error::Error; };
struct EmptySplit : Error { using Error::Error; };

// Metrics
struct NoGroundTruth : Error { using Error::Error; };

// Configuration
struct ConfigError : Error { using Error::Error; };

}  // namespace fedsim
