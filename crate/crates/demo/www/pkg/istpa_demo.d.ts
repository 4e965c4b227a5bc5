/* tslint:disable */
/* eslint-disable */

export class Overlay {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    pixels(): Uint8Array;
    height: number;
    label: number;
    marked: number;
    predicted: number;
    width: number;
}

/**
 * A reduced training run that the page advances a few steps at a time.
 */
export class Session {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Training accuracy over the last `train` call.
     */
    accuracy(): number;
    iteration(): number;
    constructor(seed: number, batch: number);
    /**
     * Eval clip `index` as `K` grayscale frames laid side by side
     * (`32·K` wide, 32 high, row-major bytes), with a 3×3 mark on every
     * position whose rescaled attention exceeds `threshold`.
     */
    overlay(index: number, threshold: number): Overlay;
    /**
     * Runs `n` SGD steps and returns the mean total loss over them.
     */
    train(n: number): number;
}

/**
 * Loss curve of projected gradient descent on the interaction loss for a
 * random `p×c` instance, followed by the PCA optimum as the last element.
 */
export function pca_curve(seed: number, p: number, c: number, d: number, steps: number): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_get_overlay_height: (a: number) => number;
    readonly __wbg_get_overlay_label: (a: number) => number;
    readonly __wbg_get_overlay_marked: (a: number) => number;
    readonly __wbg_get_overlay_predicted: (a: number) => number;
    readonly __wbg_get_overlay_width: (a: number) => number;
    readonly __wbg_overlay_free: (a: number, b: number) => void;
    readonly __wbg_session_free: (a: number, b: number) => void;
    readonly __wbg_set_overlay_height: (a: number, b: number) => void;
    readonly __wbg_set_overlay_label: (a: number, b: number) => void;
    readonly __wbg_set_overlay_marked: (a: number, b: number) => void;
    readonly __wbg_set_overlay_predicted: (a: number, b: number) => void;
    readonly __wbg_set_overlay_width: (a: number, b: number) => void;
    readonly overlay_pixels: (a: number) => [number, number];
    readonly pca_curve: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly session_accuracy: (a: number) => number;
    readonly session_iteration: (a: number) => number;
    readonly session_new: (a: number, b: number) => [number, number, number];
    readonly session_overlay: (a: number, b: number, c: number) => [number, number, number];
    readonly session_train: (a: number, b: number) => [number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __externref_table_dealloc: (a: number) => void;
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
