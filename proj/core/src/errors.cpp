#include "depthlab/errors.hpp"

namespace depthlab {

TrainingError::TrainingError(const std::string& what, std::size_t step)
    : Error(what + " (step " + std::to_string(step) + ")"), step_(step) {}

PipelineError::PipelineError(std::string stage, const std::string& what)
    : Error("[" + stage + "] " + what), stage_(std::move(stage)) {}

}  // namespace depthlab
