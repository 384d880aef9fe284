#pragma once

#include <CLI11.hpp>

#include <exception>
#include <functional>
#include <iostream>
#include <string>

#include "xmp/pipeline.hpp"

namespace xmp::cli {

enum ExitCode : int {
    kOk = 0,
    kConfigError = 2,
    kStageFailure = 3,
    kVerifyFailure = 4,
};

inline void log_line(const std::string& msg) { std::cerr << msg << std::endl; }

/// Parses and runs; maps failures onto the documented exit codes.
inline int run(CLI::App& app, int argc, char** argv, const std::function<int()>& body)
{
    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kConfigError;
    }
    try {
        return body();
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kConfigError;
    } catch (const StageError& e) {
        std::cerr << "stage '" << e.stage << "' failed: " << e.what() << "\n";
        return kStageFailure;
    } catch (const std::exception& e) {
        std::cerr << "failed: " << e.what() << "\n";
        return kStageFailure;
    }
}

}  // namespace xmp::cli
