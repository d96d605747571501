#ifndef CURATE_HTTP_HPP
#define CURATE_HTTP_HPP

#include <httplib.h>

// <resolv.h>, pulled in by httplib, defines _res as a macro; Eigen uses the
// same name for function parameters.
#ifdef _res
#undef _res
#endif

#endif  // CURATE_HTTP_HPP
