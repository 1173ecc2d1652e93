/* tslint:disable */
/* eslint-disable */

/**
 * Row-major image, `width` columns by `height` rows, row 0 at the top of the slab.
 */
export class Image {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    values(): Float64Array;
    readonly height: number;
    readonly width: number;
}

export class Inversion {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    /**
     * J after each iteration.
     */
    objective(): Float64Array;
    reconstruction(): Image;
    truth(): Image;
    readonly rel_error: number;
    readonly status: string;
}

/**
 * First row holds the α samples, then one row per orthonormal basis function.
 */
export function basis_curves(n: number, samples: number): Float64Array;

/**
 * Full synthetic round trip on a coarse grid small enough for the main thread.
 */
export function invert(preset: string, c: number, lambda: number, radius: number, iterations: number): Inversion;

/**
 * Travel time from the source at (α, ½, 0) through the slab A ≤ z ≤ A + σ.
 */
export function travel_time_section(preset: string, c: number, alpha: number, refine: number): Image;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_image_free: (a: number, b: number) => void;
    readonly __wbg_inversion_free: (a: number, b: number) => void;
    readonly basis_curves: (a: number, b: number) => [number, number, number, number];
    readonly image_height: (a: number) => number;
    readonly image_values: (a: number) => [number, number];
    readonly image_width: (a: number) => number;
    readonly inversion_objective: (a: number) => [number, number];
    readonly inversion_reconstruction: (a: number) => number;
    readonly inversion_rel_error: (a: number) => number;
    readonly inversion_status: (a: number) => [number, number];
    readonly inversion_truth: (a: number) => number;
    readonly invert: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number];
    readonly travel_time_section: (a: number, b: number, c: number, d: number, e: number) => [number, number, number];
    readonly __externref_table_alloc: () => number;
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;
