// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace mcpm {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed input: bad files, shape mismatches, invalid configuration.
class InputError : public Error {
public:
    using Error::Error;
};

/// Base for numerical failures (non-PSD matrices, MGF singularities).
class NumericalError : public Error {
public:
    using Error::Error;
};

class FactorizationError : public NumericalError {
public:
    using NumericalError::NumericalError;
};

/// Raised when 1 - t^2 Var(w_q) Var(f_q) falls to or below the domain guard.
/// Indices that are unknown at the throw site are left at -1.
class MgfDomainError : public NumericalError {
public:
    MgfDomainError(long latent, double denominator, long cell = -1, long task = -1)
        : NumericalError(describe(latent, denominator, cell, task)),
          latent_(latent), cell_(cell), task_(task), denominator_(denominator) {}

    [[nodiscard]] long latent() const noexcept { return latent_; }
    [[nodiscard]] long cell() const noexcept { return cell_; }
    [[nodiscard]] long task() const noexcept { return task_; }
    [[nodiscard]] double denominator() const noexcept { return denominator_; }

    [[nodiscard]] MgfDomainError with_context(long cell, long task) const {
        return MgfDomainError(latent_, denominator_, cell, task);
    }

private:
    static std::string describe(long q, double d, long n, long p) {
        std::string msg = "MGF domain violation at latent q=" + std::to_string(q);
        if (n >= 0) msg += ", cell n=" + std::to_string(n);
        if (p >= 0) msg += ", task p=" + std::to_string(p);
        msg += " (1 - t^2 Var(w) Var(f) = " + std::to_string(d) + ")";
        return msg;
    }

    long latent_;
    long cell_;
    long task_;
    double denominator_;
};

class ConvergenceError : public Error {
public:
    using Error::Error;
};

}  // namespace mcpm
