from .moments import pixel_moment_heading
